//! Binary checkpoints.
//!
//! Layout, all little-endian: the magic `VIAB`, a `u32` format version and
//! a `u64` entry count, then per entry a `u32` name length, the UTF-8
//! name, a `u32` rank (0 to 2), one `u64` per dimension and the values as
//! `f64`. Integers that may exceed 2^53 are stored as two `f64` halves.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Activation, AdamConfig, AdamState, Block, LrSchedule, ParamSet};
use crate::tasks::TaskLoss;
use crate::trainer::{HistoryPoint, Learner, Method, MetaParams, MethodSpec, Snapshot, TrainState};

pub const MAGIC: [u8; 4] = *b"VIAB";
pub const VERSION: u32 = 1;

/// One named array of the container.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<u64>,
    pub values: Vec<f64>,
}

impl Entry {
    fn block(name: impl Into<String>, b: &Block) -> Self {
        Self {
            name: name.into(),
            dims: vec![b.rows as u64, b.cols as u64],
            values: b.values.clone(),
        }
    }

    fn vector(name: impl Into<String>, values: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            dims: vec![values.len() as u64],
            values,
        }
    }

    fn scalar(name: impl Into<String>, value: f64) -> Self {
        Self {
            name: name.into(),
            dims: Vec::new(),
            values: vec![value],
        }
    }

    fn integer(name: impl Into<String>, value: u64) -> Self {
        Self::vector(name, split(value).to_vec())
    }
}

fn split(v: u64) -> [f64; 2] {
    [(v >> 32) as f64, (v & 0xFFFF_FFFF) as f64]
}

pub fn encode_entries(entries: &[Entry]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
        for d in &e.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &e.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(Error::Truncated(what));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parses the container. Structural problems are reported as bad magic,
/// version mismatch or truncation; anything else is [`Error::Corrupt`].
pub fn decode_entries(bytes: &[u8]) -> Result<Vec<Entry>> {
    let mut r = Reader { bytes };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::VersionMismatch(version));
    }
    let count = r.u64("entry count")?;
    let mut entries = Vec::new();
    let mut names = HashSet::new();
    for _ in 0..count {
        let len = r.u32("entry name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "entry name")?)
            .map_err(|_| Error::Corrupt("entry name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("entry rank")?;
        if rank > 2 {
            return Err(Error::Corrupt(format!("{name}: rank {rank} exceeds 2")));
        }
        let mut dims = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            dims.push(r.u64("entry dimensions")?);
        }
        let n = dims
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Corrupt(format!("{name}: dimensions overflow")))?;
        let n = usize::try_from(n).map_err(|_| Error::Corrupt(format!("{name}: entry too large")))?;
        let raw = r.take(n, "entry values")?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if !names.insert(name.clone()) {
            return Err(Error::Corrupt(format!("duplicate entry {name}")));
        }
        entries.push(Entry { name, dims, values });
    }
    if !r.bytes.is_empty() {
        return Err(Error::Corrupt(format!("{} trailing bytes", r.bytes.len())));
    }
    Ok(entries)
}

/// Everything needed to rebuild a learner and continue its training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: MethodSpec,
    pub state: TrainState,
}

fn widths(v: &[usize]) -> Vec<f64> {
    v.iter().map(|&w| w as f64).collect()
}

fn push_params(out: &mut Vec<Entry>, prefix: &str, set: &ParamSet) {
    for (name, b) in set.iter() {
        out.push(Entry::block(format!("{prefix}.{name}"), b));
    }
}

fn push_adam(out: &mut Vec<Entry>, prefix: &str, set: &ParamSet, adam: &AdamState) {
    let c = adam.config;
    out.push(Entry::vector(format!("{prefix}.config"), vec![c.beta1, c.beta2, c.eps]));
    out.push(Entry::integer(format!("{prefix}.step"), adam.step));
    for (((name, b), m), v) in set.iter().zip(&adam.first).zip(&adam.second) {
        out.push(Entry {
            name: format!("{prefix}.m.{name}"),
            dims: vec![b.rows as u64, b.cols as u64],
            values: m.clone(),
        });
        out.push(Entry {
            name: format!("{prefix}.v.{name}"),
            dims: vec![b.rows as u64, b.cols as u64],
            values: v.clone(),
        });
    }
}

impl Checkpoint {
    pub fn entries(&self) -> Vec<Entry> {
        let s = &self.spec;
        let st = &self.state;
        let mut out = vec![
            Entry::scalar("spec.method", s.method.code() as f64),
            Entry::scalar("spec.inner_steps", s.inner_steps as f64),
            Entry::scalar("spec.inner_lr", s.inner_lr),
            Entry::vector(
                "spec.schedule",
                vec![s.schedule.base, s.schedule.factor, s.schedule.period as f64],
            ),
            Entry::vector("spec.dims", widths(&[s.phi_dim, s.x_dim, s.y_dim])),
            Entry::vector("spec.hidden", widths(&s.hidden)),
            Entry::vector("spec.loss_hidden", widths(&s.loss_hidden)),
            Entry::scalar(
                "spec.activation",
                match s.activation {
                    Activation::Relu => 0.0,
                    Activation::Tanh => 1.0,
                },
            ),
            Entry::scalar(
                "spec.task_loss",
                match s.task_loss {
                    TaskLoss::Mse => 0.0,
                    TaskLoss::CrossEntropy => 1.0,
                },
            ),
            Entry::integer("state.seed", st.seed),
            Entry::integer("state.iteration", st.iteration),
        ];
        push_params(&mut out, "theta", &st.params.theta);
        push_adam(&mut out, "adam.theta", &st.params.theta, &st.adam_theta);
        if let (Some(psi), Some(adam)) = (&st.params.psi, &st.adam_psi) {
            push_params(&mut out, "psi", psi);
            push_adam(&mut out, "adam.psi", psi, adam);
        }
        let mut history = Vec::with_capacity(3 * st.history.len());
        for h in &st.history {
            history.extend(split(h.iteration));
            history.push(h.score);
        }
        out.push(Entry {
            name: "history".into(),
            dims: vec![st.history.len() as u64, 3],
            values: history,
        });
        if let Some(best) = &st.best {
            out.push(Entry::scalar("best.score", best.score));
            out.push(Entry::integer("best.iteration", best.iteration));
            push_params(&mut out, "best.theta", &best.params.theta);
            if let Some(psi) = &best.params.psi {
                push_params(&mut out, "best.psi", psi);
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        encode_entries(&self.entries())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let entries = decode_entries(bytes)?;
        let mut t = Entries {
            entries: entries.iter().map(|e| (e.name.as_str(), e)).collect(),
        };
        let spec = t.spec()?;
        let widest = [spec.phi_dim, spec.x_dim, spec.y_dim]
            .iter()
            .chain(&spec.hidden)
            .chain(&spec.loss_hidden)
            .copied()
            .max()
            .unwrap_or(0);
        if widest > bytes.len() || spec.hidden.len() + spec.loss_hidden.len() > bytes.len() {
            return Err(Error::Corrupt("stored network is larger than the file".into()));
        }
        let learner = Learner::new(spec.clone()).map_err(|e| Error::Corrupt(format!("stored spec: {e}")))?;
        // Every parameter is stored at least once, which bounds the template.
        let n = learner.model.spec.num_params() + learner.loss_net.as_ref().map_or(0, |l| l.spec().num_params());
        if n > bytes.len() / 8 {
            return Err(Error::Corrupt("stored spec does not match the stored parameters".into()));
        }
        let template = learner.init_params(&mut ChaCha8Rng::seed_from_u64(0));

        let seed = t.integer("state.seed")?;
        let iteration = t.integer("state.iteration")?;
        let theta = t.params("theta", &template.theta)?;
        let adam_theta = t.adam("adam.theta", &theta)?;
        let (psi, adam_psi) = match &template.psi {
            Some(tpl) => {
                let psi = t.params("psi", tpl)?;
                let adam = t.adam("adam.psi", &psi)?;
                (Some(psi), Some(adam))
            }
            None => (None, None),
        };
        let raw = t.take("history")?;
        if raw.dims.len() != 2 || raw.dims[1] != 3 {
            return Err(Error::Corrupt("history must be an n x 3 array".into()));
        }
        let mut history = Vec::new();
        for row in raw.values.chunks_exact(3) {
            history.push(HistoryPoint {
                iteration: join("history", [row[0], row[1]])?,
                score: row[2],
            });
        }
        let best = if t.entries.contains_key("best.score") {
            let score = t.scalar("best.score")?;
            let iteration = t.integer("best.iteration")?;
            let theta = t.params("best.theta", &template.theta)?;
            let psi = match &template.psi {
                Some(tpl) => Some(t.params("best.psi", tpl)?),
                None => None,
            };
            Some(Snapshot {
                params: MetaParams { theta, psi },
                score,
                iteration,
            })
        } else {
            None
        };
        if let Some(name) = t.entries.keys().next() {
            return Err(Error::Corrupt(format!("unexpected entry {name}")));
        }
        Ok(Self {
            spec,
            state: TrainState {
                params: MetaParams { theta, psi },
                adam_theta,
                adam_psi,
                iteration,
                seed,
                best,
                history,
            },
        })
    }

    /// Writes atomically: a sibling temporary file is renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn join(name: &str, halves: [f64; 2]) -> Result<u64> {
    let ok = |v: f64| v.fract() == 0.0 && (0.0..=u32::MAX as f64).contains(&v);
    if !ok(halves[0]) || !ok(halves[1]) {
        return Err(Error::Corrupt(format!("{name}: not an encoded integer")));
    }
    Ok(((halves[0] as u64) << 32) | halves[1] as u64)
}

/// Entries not yet consumed, by name.
struct Entries<'a> {
    entries: std::collections::BTreeMap<&'a str, &'a Entry>,
}

impl<'a> Entries<'a> {
    fn take(&mut self, name: &str) -> Result<&'a Entry> {
        self.entries
            .remove(name)
            .ok_or_else(|| Error::Corrupt(format!("missing entry {name}")))
    }

    fn vector(&mut self, name: &str) -> Result<&'a [f64]> {
        let e = self.take(name)?;
        if e.dims.len() != 1 {
            return Err(Error::Corrupt(format!("{name}: expected a vector")));
        }
        Ok(&e.values)
    }

    fn fixed<const N: usize>(&mut self, name: &str) -> Result<[f64; N]> {
        self.vector(name)?
            .try_into()
            .map_err(|_| Error::Corrupt(format!("{name}: expected {N} values")))
    }

    fn scalar(&mut self, name: &str) -> Result<f64> {
        let e = self.take(name)?;
        if !e.dims.is_empty() {
            return Err(Error::Corrupt(format!("{name}: expected a scalar")));
        }
        Ok(e.values[0])
    }

    fn integer(&mut self, name: &str) -> Result<u64> {
        join(name, self.fixed::<2>(name)?)
    }

    fn count(name: &str, v: f64) -> Result<usize> {
        if v.fract() == 0.0 && (0.0..=(1u64 << 32) as f64).contains(&v) {
            Ok(v as usize)
        } else {
            Err(Error::Corrupt(format!("{name}: {v} is not a count")))
        }
    }

    fn counts(&mut self, name: &str) -> Result<Vec<usize>> {
        self.vector(name)?.iter().map(|&v| Self::count(name, v)).collect()
    }

    fn spec(&mut self) -> Result<MethodSpec> {
        let code = Self::count("spec.method", self.scalar("spec.method")?)?;
        let method = u32::try_from(code)
            .ok()
            .and_then(Method::from_code)
            .ok_or_else(|| Error::Corrupt(format!("unknown method code {code}")))?;
        let inner_steps = Self::count("spec.inner_steps", self.scalar("spec.inner_steps")?)?;
        let inner_lr = self.scalar("spec.inner_lr")?;
        let [base, factor, period] = self.fixed::<3>("spec.schedule")?;
        let schedule = LrSchedule::new(base, factor, Self::count("spec.schedule", period)? as u64)
            .map_err(|e| Error::Corrupt(e.to_string()))?;
        let dims = self.counts("spec.dims")?;
        let [phi_dim, x_dim, y_dim] = dims[..]
            .try_into()
            .map_err(|_| Error::Corrupt("spec.dims: expected 3 values".into()))?;
        let hidden = self.counts("spec.hidden")?;
        let loss_hidden = self.counts("spec.loss_hidden")?;
        let activation = match self.scalar("spec.activation")? {
            0.0 => Activation::Relu,
            1.0 => Activation::Tanh,
            v => return Err(Error::Corrupt(format!("unknown activation code {v}"))),
        };
        let task_loss = match self.scalar("spec.task_loss")? {
            0.0 => TaskLoss::Mse,
            1.0 => TaskLoss::CrossEntropy,
            v => return Err(Error::Corrupt(format!("unknown task loss code {v}"))),
        };
        Ok(MethodSpec {
            method,
            inner_steps,
            inner_lr,
            schedule,
            phi_dim,
            x_dim,
            y_dim,
            hidden,
            loss_hidden,
            activation,
            task_loss,
        })
    }

    fn params(&mut self, prefix: &str, template: &ParamSet) -> Result<ParamSet> {
        let mut set = template.clone();
        let mut blocks = Vec::with_capacity(template.len());
        for (name, b) in template.iter() {
            let full = format!("{prefix}.{name}");
            let e = self.take(&full)?;
            if e.dims != [b.rows as u64, b.cols as u64] {
                return Err(Error::Corrupt(format!(
                    "{full}: stored shape {:?} does not match {:?}",
                    e.dims,
                    b.shape()
                )));
            }
            blocks.push(Block::new(b.rows, b.cols, e.values.clone())?);
        }
        set.assign(&blocks)?;
        Ok(set)
    }

    fn adam(&mut self, prefix: &str, params: &ParamSet) -> Result<AdamState> {
        let [beta1, beta2, eps] = self.fixed::<3>(&format!("{prefix}.config"))?;
        let step = self.integer(&format!("{prefix}.step"))?;
        let mut state = AdamState::new(params, AdamConfig { beta1, beta2, eps });
        state.step = step;
        for (i, (name, b)) in params.iter().enumerate() {
            for (which, dst) in [("m", &mut state.first[i]), ("v", &mut state.second[i])] {
                let full = format!("{prefix}.{which}.{name}");
                let e = self.take(&full)?;
                if e.dims != [b.rows as u64, b.cols as u64] {
                    return Err(Error::Corrupt(format!("{full}: shape mismatch")));
                }
                dst.copy_from_slice(&e.values);
            }
        }
        Ok(state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::{train, TrainConfig};

    fn trained(method: Method) -> Checkpoint {
        let spec = MethodSpec {
            hidden: vec![6],
            loss_hidden: if method.uses_loss_net() { vec![4] } else { Vec::new() },
            ..MethodSpec::sine(method, 2)
        };
        let learner = Learner::new(spec.clone()).unwrap();
        let config = TrainConfig {
            iters: 3,
            val_every: 2,
            meta_batch: 2,
            val_tasks: 2,
            ..TrainConfig::sine(u64::MAX - 3)
        };
        Checkpoint {
            spec,
            state: train(&learner, &config).unwrap(),
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        for method in Method::ALL {
            let ck = trained(method);
            let bytes = ck.to_bytes();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn header_is_as_documented() {
        let bytes = trained(Method::Cavia).to_bytes();
        assert_eq!(&bytes[..4], b"VIAB");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
    }

    #[test]
    fn every_truncation_is_reported_as_such() {
        let bytes = trained(Method::SimViable).to_bytes();
        for cut in [0, 3, 4, 7, 8, 15, 16, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Truncated(_))),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn magic_and_version_are_checked() {
        let mut bytes = trained(Method::Cavia).to_bytes();
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&wrong), Err(Error::BadMagic(_))));
        bytes[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::VersionMismatch(9))));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let ck = trained(Method::Cavia);
        let mut entries = ck.entries();
        let e = entries.iter_mut().find(|e| e.name == "theta.layer0.weight").unwrap();
        e.dims = vec![e.dims[1], e.dims[0]];
        assert!(matches!(
            Checkpoint::from_bytes(&encode_entries(&entries)),
            Err(Error::Corrupt(_))
        ));
    }

    #[test]
    fn unknown_and_duplicate_entries_are_rejected() {
        let ck = trained(Method::Cavia);
        let mut entries = ck.entries();
        entries.push(Entry::scalar("extra", 1.0));
        assert!(Checkpoint::from_bytes(&encode_entries(&entries)).is_err());
        let mut entries = ck.entries();
        entries.push(entries[0].clone());
        assert!(matches!(decode_entries(&encode_entries(&entries)), Err(Error::Corrupt(_))));
    }

    #[test]
    fn huge_dimensions_do_not_allocate() {
        let mut bytes = encode_entries(&[]);
        bytes[8] = 1;
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.push(b'x');
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(decode_entries(&bytes), Err(Error::Corrupt(_))));
        let mut bytes = encode_entries(&[]);
        bytes[8] = 1;
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.push(b'x');
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&(1u64 << 40).to_le_bytes());
        assert!(matches!(decode_entries(&bytes), Err(Error::Truncated(_))));
    }

    #[test]
    fn save_and_load_through_the_filesystem() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let ck = trained(Method::RelViable);
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        assert!(matches!(
            Checkpoint::load(&dir.path().join("missing")),
            Err(Error::Io { .. })
        ));
    }
}
