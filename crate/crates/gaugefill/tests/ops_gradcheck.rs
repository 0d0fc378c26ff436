//! Randomized finite-difference checks for every differentiable tape op:
//! central differences at h = 1e-5, relative tolerance 1e-4, ten random
//! shapes per op.

use std::sync::Arc;

use gaugefill::gradcheck::{check_tape_gradients, DEFAULT_FLOOR, DEFAULT_STEP};
use gaugefill::plan::AttentionPlan;
use gaugefill::tape::{Tape, VarId};
use gaugefill::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

/// Values bounded away from zero so ReLU kinks cannot poison the check.
fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            sign * rng.gen_range(0.2..1.2)
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn random_shielded_plan(rng: &mut ChaCha8Rng, len: usize) -> Arc<AttentionPlan> {
    let m = rng.gen_range(1..=len);
    let mut idx: Vec<usize> = (0..len).collect();
    for i in (1..len).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx.truncate(m);
    Arc::new(AttentionPlan::shielded(len, &idx).unwrap())
}

fn check(
    name: &str,
    build: &dyn Fn(&mut Tape, &[VarId]) -> gaugefill::Result<VarId>,
    inputs: &[Tensor],
) {
    if let Err(msg) = check_tape_gradients(build, inputs, DEFAULT_STEP, TOL, DEFAULT_FLOOR) {
        panic!("{name}: {msg}");
    }
}

#[test]
fn matmul_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for _ in 0..10 {
        let (m, k, n) = (
            rng.gen_range(1..5),
            rng.gen_range(1..5),
            rng.gen_range(1..5),
        );
        let inputs = vec![
            rand_tensor(&mut rng, vec![m, k]),
            rand_tensor(&mut rng, vec![k, n]),
            rand_tensor(&mut rng, vec![m, n]),
        ];
        check(
            "matmul",
            &|t, ids| {
                let y = t.matmul(ids[0], ids[1])?;
                let weighted = t.mul(y, ids[2])?;
                t.sum_all(weighted)
            },
            &inputs,
        );
    }
}

#[test]
fn matmul_times_fixed_vector_tight_tolerance() {
    // loss = sum(W x) with x fixed: dW must match central differences to 1e-6.
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let w = rand_tensor(&mut rng, vec![4, 3]);
    let x = rand_tensor(&mut rng, vec![3, 1]);
    let x_fixed = x.clone();
    let build = move |t: &mut Tape, ids: &[VarId]| {
        let xv = t.leaf(x_fixed.clone())?;
        let y = t.matmul(ids[0], xv)?;
        t.sum_all(y)
    };
    if let Err(msg) =
        check_tape_gradients(&build, &[w], DEFAULT_STEP, 1e-6, DEFAULT_FLOOR)
    {
        panic!("matmul fixed-vector: {msg}");
    }
}

#[test]
fn elementwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    for _ in 0..10 {
        let r = rng.gen_range(1..5);
        let c = rng.gen_range(1..5);
        let inputs = vec![
            rand_tensor(&mut rng, vec![r, c]),
            rand_tensor(&mut rng, vec![r, c]),
            rand_tensor(&mut rng, vec![r, c]),
        ];
        check(
            "add/sub/mul chain",
            &|t, ids| {
                let a = t.add(ids[0], ids[1])?;
                let s = t.sub(a, ids[2])?;
                let m = t.mul(s, ids[0])?;
                t.sum_all(m)
            },
            &inputs,
        );
    }
}

#[test]
fn add_bias_and_scale_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    for _ in 0..10 {
        let r = rng.gen_range(1..6);
        let c = rng.gen_range(1..6);
        let inputs = vec![
            rand_tensor(&mut rng, vec![r, c]),
            rand_tensor(&mut rng, vec![c]),
            rand_tensor(&mut rng, vec![r, c]),
        ];
        check(
            "add_bias+scale",
            &|t, ids| {
                let y = t.add_bias(ids[0], ids[1])?;
                let y = t.scale(y, 0.37)?;
                let w = t.mul(y, ids[2])?;
                t.sum_all(w)
            },
            &inputs,
        );
    }
}

#[test]
fn relu_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    for _ in 0..10 {
        let n = rng.gen_range(1..12);
        let inputs = vec![rand_tensor(&mut rng, vec![n]), rand_tensor(&mut rng, vec![n])];
        check(
            "relu",
            &|t, ids| {
                let y = t.relu(ids[0])?;
                let w = t.mul(y, ids[1])?;
                t.sum_all(w)
            },
            &inputs,
        );
    }
}

#[test]
fn layer_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    for _ in 0..10 {
        let r = rng.gen_range(1..5);
        let c = rng.gen_range(2..7);
        let inputs = vec![
            rand_tensor(&mut rng, vec![r, c]),
            rand_tensor(&mut rng, vec![c]),
            rand_tensor(&mut rng, vec![c]),
            rand_tensor(&mut rng, vec![r, c]),
        ];
        check(
            "layer_norm",
            &|t, ids| {
                let y = t.layer_norm(ids[0], ids[1], ids[2])?;
                let w = t.mul(y, ids[3])?;
                t.sum_all(w)
            },
            &inputs,
        );
    }
}

#[test]
fn softmax_masked_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    for _ in 0..10 {
        let len = rng.gen_range(2..7);
        let plan = random_shielded_plan(&mut rng, len);
        let inputs = vec![
            rand_tensor(&mut rng, vec![len, len]),
            rand_tensor(&mut rng, vec![len, len]),
        ];
        let plan_c = plan.clone();
        check(
            "softmax_masked",
            &move |t, ids| {
                let w = t.softmax_masked(ids[0], plan_c.clone())?;
                let v = t.mul(w, ids[1])?;
                t.sum_all(v)
            },
            &inputs,
        );
    }
}

#[test]
fn concat_sum_axis_gather_reshape_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    for _ in 0..10 {
        let r = rng.gen_range(1..5);
        let c1 = rng.gen_range(1..4);
        let c2 = rng.gen_range(1..4);
        let k = rng.gen_range(1..5);
        let indices: Arc<Vec<usize>> =
            Arc::new((0..k).map(|_| rng.gen_range(0..r)).collect());
        let axis = rng.gen_range(0..2usize);
        let inputs = vec![
            rand_tensor(&mut rng, vec![r, c1]),
            rand_tensor(&mut rng, vec![r, c2]),
            rand_tensor(&mut rng, vec![k, c1 + c2]),
        ];
        let idx = indices.clone();
        check(
            "concat+gather_rows+sum_axis+reshape",
            &move |t, ids| {
                let cat = t.concat(&[ids[0], ids[1]])?;
                let picked = t.gather_rows(cat, idx.clone())?;
                let w = t.mul(picked, ids[2])?;
                let s = t.sum_axis(w, axis)?;
                let total = t.value(s).numel();
                let s = t.reshape(s, vec![1, total])?;
                t.sum_all(s)
            },
            &inputs,
        );
    }
}

#[test]
fn sparse_attn_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    for _ in 0..10 {
        let len = rng.gen_range(2..7);
        let d = rng.gen_range(2..5);
        let plan = random_shielded_plan(&mut rng, len);
        let pairs = plan.pair_count();
        let inputs = vec![
            rand_tensor(&mut rng, vec![len, d]),
            rand_tensor(&mut rng, vec![len, d]),
            rand_tensor(&mut rng, vec![len, d]),
            rand_tensor(&mut rng, vec![pairs, d]),
            rand_tensor(&mut rng, vec![len, d]),
        ];
        let plan_c = plan.clone();
        check(
            "sparse_attn",
            &move |t, ids| {
                let z = t.sparse_attn(ids[0], ids[1], ids[2], ids[3], plan_c.clone())?;
                let w = t.mul(z, ids[4])?;
                t.sum_all(w)
            },
            &inputs,
        );
    }
}

#[test]
fn linear_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(109);
    for _ in 0..10 {
        let (r, c_in, c_out) = (
            rng.gen_range(1..5),
            rng.gen_range(1..5),
            rng.gen_range(1..5),
        );
        let inputs = vec![
            rand_tensor(&mut rng, vec![r, c_in]),
            rand_tensor(&mut rng, vec![c_in, c_out]),
            rand_tensor(&mut rng, vec![c_out]),
            rand_tensor(&mut rng, vec![r, c_out]),
        ];
        check(
            "linear",
            &|t, ids| {
                let y = t.linear(ids[0], ids[1], ids[2])?;
                let w = t.mul(y, ids[3])?;
                t.sum_all(w)
            },
            &inputs,
        );
    }
}
