use crate::{AutodiffError, Graph, Primitive};

#[test]
fn variable_reads_back() {
    let mut g = Graph::new();
    let x = g.variable(vec![3.0], 1, 1).unwrap();
    assert_eq!(g.value(x), &[3.0]);
    let m = g.variable(vec![0.0; 6], 2, 3).unwrap();
    assert_eq!(m.shape(), (2, 3));
}

#[test]
fn variable_rejects_bad_block() {
    let mut g = Graph::new();
    assert_eq!(
        g.variable(vec![1.0, 2.0, 3.0], 2, 2),
        Err(AutodiffError::BadBlock {
            len: 3,
            rows: 2,
            cols: 2
        })
    );
}

#[test]
fn grad_of_self_is_ones() {
    let mut g = Graph::new();
    let x = g.variable(vec![1.0, -2.0, 0.5, 4.0, 7.0, 8.0], 2, 3).unwrap();
    let s = g.sum(x).unwrap();
    let dx = g.grad(s, &[x], false).unwrap().of(x);
    assert_eq!(g.value(dx), &[1.0; 6]);

    let y = g.variable(vec![2.5], 1, 1).unwrap();
    let dy = g.grad(y, &[y], false).unwrap().of(y);
    assert_eq!(g.value(dy), &[1.0]);
}

#[test]
fn primitive_examples() {
    let mut g = Graph::new();
    let v = g.variable(vec![1.0, 2.0, 3.0, 6.0], 1, 4).unwrap();
    let m = g.apply(Primitive::Mean, &[v]).unwrap();
    assert_eq!(g.scalar_value(m), 3.0);

    let three = g.variable(vec![3.0], 1, 1).unwrap();
    let sq = g.apply(Primitive::Square, &[three]).unwrap();
    assert_eq!(g.scalar_value(sq), 9.0);

    let logits = g.variable(vec![0.0, 0.0, 0.0], 1, 3).unwrap();
    let label = g.constant(vec![0.0, 1.0, 0.0], 1, 3).unwrap();
    let ce = g
        .apply(Primitive::SoftmaxCrossEntropy, &[logits, label])
        .unwrap();
    assert!((g.value(ce)[0] - 3f64.ln()).abs() < 1e-12);
}

#[test]
fn first_and_second_derivative_of_square() {
    let mut g = Graph::new();
    let x = g.variable(vec![3.0], 1, 1).unwrap();
    let y = g.square(x).unwrap();
    let dy = g.grad(y, &[x], true).unwrap().of(x);
    assert_eq!(g.scalar_value(dy), 6.0);
    let d2y = g.grad(dy, &[x], false).unwrap().of(x);
    assert_eq!(g.scalar_value(d2y), 2.0);
}

#[test]
fn third_derivative_of_cube() {
    let mut g = Graph::new();
    let x = g.variable(vec![2.0], 1, 1).unwrap();
    let x2 = g.square(x).unwrap();
    let y = g.mul(x2, x).unwrap();
    let d1 = g.grad(y, &[x], true).unwrap().of(x);
    let d2 = g.grad(d1, &[x], true).unwrap().of(x);
    let d3 = g.grad(d2, &[x], true).unwrap().of(x);
    assert_eq!(g.scalar_value(d1), 12.0);
    assert_eq!(g.scalar_value(d2), 12.0);
    assert_eq!(g.scalar_value(d3), 6.0);
}

#[test]
fn gradients_without_create_graph_are_constants() {
    let mut g = Graph::new();
    let x = g.variable(vec![3.0], 1, 1).unwrap();
    let y = g.square(x).unwrap();
    let dy = g.grad(y, &[x], false).unwrap().of(x);
    assert_eq!(g.scalar_value(dy), 6.0);
    let d2y = g.grad(dy, &[x], false).unwrap().of(x);
    assert_eq!(g.scalar_value(d2y), 0.0);
}

#[test]
fn unrelated_input_gets_zero_gradient() {
    let mut g = Graph::new();
    let x = g.variable(vec![1.0, 2.0], 1, 2).unwrap();
    let z = g.variable(vec![5.0, 6.0, 7.0], 3, 1).unwrap();
    let s = g.sum(x).unwrap();
    let grads = g.grad(s, &[x, z], false).unwrap();
    assert_eq!(g.value(grads.of(z)), &[0.0; 3]);
    assert_eq!(grads.len(), 2);
}

#[test]
fn multiple_paths_accumulate() {
    // y = x*x + 3x  => dy/dx = 2x + 3
    let mut g = Graph::new();
    let x = g.variable(vec![1.5], 1, 1).unwrap();
    let xx = g.mul(x, x).unwrap();
    let x3 = g.scale(x, 3.0).unwrap();
    let y = g.add(xx, x3).unwrap();
    let d = g.grad(y, &[x], false).unwrap().of(x);
    assert_eq!(g.scalar_value(d), 6.0);
}

#[test]
fn shape_errors() {
    let mut g = Graph::new();
    let a = g.zeros(2, 3);
    let b = g.zeros(2, 3);
    let c = g.zeros(3, 2);
    assert!(matches!(
        g.matmul(a, b),
        Err(AutodiffError::ShapeMismatch { op: "matmul", .. })
    ));
    assert!(matches!(
        g.add(a, c),
        Err(AutodiffError::ShapeMismatch { op: "add", .. })
    ));
    assert!(matches!(
        g.concat_rows(&[a, c]),
        Err(AutodiffError::ShapeMismatch { op: "concat_rows", .. })
    ));
    let row = g.zeros(1, 3);
    assert!(g.add(a, row).is_err(), "row broadcasting is not supported");
    assert!(g.apply(Primitive::Add, &[a]).is_err());
}

#[test]
fn scalar_broadcasting() {
    let mut g = Graph::new();
    let m = g.variable(vec![1.0, 2.0, 3.0, 4.0], 2, 2).unwrap();
    let s = g.variable(vec![10.0], 1, 1).unwrap();
    let p = g.mul(s, m).unwrap();
    assert_eq!(g.value(p), &[10.0, 20.0, 30.0, 40.0]);
    let total = g.sum(p).unwrap();
    let grads = g.grad(total, &[s, m], false).unwrap();
    assert_eq!(g.value(grads.of(s)), &[10.0]);
    assert_eq!(g.value(grads.of(m)), &[10.0; 4]);
}

#[test]
fn domain_errors() {
    let mut g = Graph::new();
    let x = g.variable(vec![1.0, 0.0], 1, 2).unwrap();
    assert!(matches!(g.log(x), Err(AutodiffError::Domain { op: "log", .. })));
    let z = g.variable(vec![f64::NAN, 0.0], 1, 2).unwrap();
    let y = g.constant(vec![1.0, 0.0], 1, 2).unwrap();
    assert!(matches!(
        g.softmax_cross_entropy(z, y),
        Err(AutodiffError::Domain { .. })
    ));
    let ok = g.variable(vec![0.0, 0.0], 1, 2).unwrap();
    let neg = g.constant(vec![-1.0, 0.0], 1, 2).unwrap();
    assert!(g.softmax_cross_entropy(ok, neg).is_err());
}

#[test]
fn grad_argument_errors() {
    let mut g = Graph::new();
    let x = g.variable(vec![1.0, 2.0], 1, 2).unwrap();
    assert_eq!(
        g.grad(x, &[x], false).unwrap_err(),
        AutodiffError::NonScalarOutput((1, 2))
    );
    let mut other = Graph::new();
    for _ in 0..10 {
        other.zeros(1, 1);
    }
    let foreign = other.zeros(1, 1);
    let s = g.sum(x).unwrap();
    assert!(matches!(
        g.grad(s, &[foreign], false),
        Err(AutodiffError::UnknownNode { .. })
    ));
}

#[test]
fn detached_region_records_no_history() {
    let mut g = Graph::new();
    let x = g.variable(vec![2.0], 1, 1).unwrap();
    let y = g.detached(|g| g.square(x).unwrap());
    assert_eq!(g.scalar_value(y), 4.0);
    let d = g.grad(y, &[x], false).unwrap().of(x);
    assert_eq!(g.scalar_value(d), 0.0);
    assert!(!g.is_detached());
}

#[test]
fn gather_scatter_and_slices() {
    let mut g = Graph::new();
    let a = g.variable(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 3, 2).unwrap();
    let gathered = g.gather_rows(a, &[2, 0, 2]).unwrap();
    assert_eq!(g.value(gathered), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
    let s = g.sum(gathered).unwrap();
    let da = g.grad(s, &[a], false).unwrap().of(a);
    assert_eq!(g.value(da), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);

    let cols = g.concat_cols(&[a, a]).unwrap();
    assert_eq!(cols.shape(), (3, 4));
    assert_eq!(&g.value(cols)[..4], &[1.0, 2.0, 1.0, 2.0]);
    let sl = g.slice(cols, 1, 1, 2, 2).unwrap();
    assert_eq!(g.value(sl), &[4.0, 3.0, 6.0, 5.0]);
    assert!(g.gather_rows(a, &[3]).is_err());
}
