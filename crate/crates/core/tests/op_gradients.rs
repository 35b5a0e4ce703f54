//! Every differentiable tape op against central finite differences.

use dialkg::gradcheck::compare_all;
use dialkg::params::{seeded_init, InitScheme};
use dialkg::{ParamId, ParamStore, Result, Tape, Tensor, Var};

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn random(shape: &[usize], seed: u64) -> Tensor {
    seeded_init(shape, seed, InitScheme::UniformRange(1.5))
}

/// Builds `loss = <op(params), w>` for a fixed random `w` and checks every parameter.
fn check<F>(shapes: &[&[usize]], seed: u64, op: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| store.add(format!("p{i}"), random(s, seed + i as u64)).unwrap())
        .collect();

    let forward = |store: &ParamStore, tape: &mut Tape| -> Result<Var> {
        let vars: Vec<Var> = ids.iter().map(|&id| tape.param(store, id)).collect();
        let out = op(tape, &vars)?;
        let w = tape.constant(random(tape.value(out).shape(), seed ^ 0xABCD));
        tape.dot(out, w)
    };

    let mut tape = Tape::new();
    let loss = forward(&store, &mut tape).unwrap();
    tape.backward(loss, &mut store).unwrap();

    let reports = compare_all(&mut store, STEP, 1e-6, |s| {
        let mut tape = Tape::new();
        let l = forward(s, &mut tape)?;
        Ok(tape.scalar(l))
    })
    .unwrap();
    for r in reports {
        assert!(
            r.max_rel_error < TOL,
            "{}: rel err {} at {} (analytic {}, numeric {})",
            r.name,
            r.max_rel_error,
            r.worst_index,
            r.analytic,
            r.numeric
        );
    }
}

#[test]
fn matmul_random_3x4_by_4x2() {
    check(&[&[3, 4], &[4, 2]], 1, |t, v| t.matmul(v[0], v[1]));
}

#[test]
fn matmul_gradient_of_sum_is_row_sums_of_b() {
    let mut store = ParamStore::new();
    let a = store.add("a", random(&[3, 4], 5)).unwrap();
    let b_val = random(&[4, 2], 6);
    let mut tape = Tape::new();
    let av = tape.param(&store, a);
    let bv = tape.constant(b_val.clone());
    let prod = tape.matmul(av, bv).unwrap();
    let s = tape.sum(prod).unwrap();
    tape.backward(s, &mut store).unwrap();
    let g = store.get(a).gradient();
    for i in 0..3 {
        for j in 0..4 {
            let row_sum: f64 = b_val.row(j).iter().sum();
            assert!((g.at(i, j) - row_sum).abs() < 1e-14);
        }
    }
}

#[test]
fn matmul_nt_and_matvec() {
    check(&[&[3, 4], &[5, 4]], 2, |t, v| t.matmul_nt(v[0], v[1]));
    check(&[&[3, 4], &[4]], 3, |t, v| t.matvec(v[0], v[1]));
}

#[test]
fn elementwise_ops() {
    check(&[&[6], &[6]], 4, |t, v| t.add(v[0], v[1]));
    check(&[&[6], &[6]], 5, |t, v| t.sub(v[0], v[1]));
    check(&[&[2, 3], &[2, 3]], 6, |t, v| t.mul(v[0], v[1]));
    check(&[&[5]], 7, |t, v| t.scale(v[0], -0.7));
    check(&[&[5]], 8, |t, v| t.sigmoid(v[0]));
    check(&[&[5]], 9, |t, v| t.tanh(v[0]));
    check(&[&[7]], 10, |t, v| t.leaky_relu(v[0], 0.2));
    check(&[&[4]], 11, |t, v| {
        t.mul_const(v[0], Tensor::vector(vec![0.0, 2.0, -1.0, 0.5]))
    });
}

#[test]
fn structural_ops() {
    check(&[&[3, 4], &[4]], 12, |t, v| t.add_row(v[0], v[1]));
    check(&[&[3], &[2], &[4]], 13, |t, v| t.concat(v));
    check(&[&[6]], 14, |t, v| t.slice(v[0], 2, 3));
    check(&[&[4], &[2, 4], &[4]], 15, |t, v| t.stack_rows(v));
    check(&[&[5, 3]], 16, |t, v| t.gather_rows(v[0], &[4, 1, 1, 0]));
    check(&[&[5, 3]], 17, |t, v| t.row(v[0], 2));
    check(&[&[5], &[5]], 18, |t, v| t.dot(v[0], v[1]));
    check(&[&[2, 3]], 19, |t, v| t.sum(v[0]));
    check(&[&[4], &[3]], 20, |t, v| t.outer_add(v[0], v[1]));
    check(&[&[3, 4]], 21, |t, v| t.masked_mean_rows(v[0], &[true, false, true]));
}

#[test]
fn reductions_and_mixing() {
    check(&[&[2, 3], &[3, 4]], 22, |t, v| t.mix(v[0], v[1]));
    check(&[&[3], &[3, 4]], 23, |t, v| t.weighted_sum(v[0], v[1]));
    check(&[&[], &[], &[]], 24, |t, v| t.sum_scalars(v));
}

#[test]
fn softmax_family() {
    check(&[&[5]], 25, |t, v| t.softmax(v[0]));
    check(&[&[5]], 26, |t, v| t.masked_softmax(v[0], &[true, false, true, true, false]));
    let mask = [true, true, false, false, true, true, true, false, true];
    check(&[&[3, 3]], 27, move |t, v| t.masked_softmax_rows(v[0], &mask));
    check(&[&[6]], 28, |t, v| t.cross_entropy(v[0], 4));
}
