//! Central finite-difference verification of tape gradients.
//!
//! Every kernel's backward rule is checked against the central difference
//! `(f(x+h) - f(x-h)) / 2h` at `f64`, elementwise over every input. The
//! comparison uses a combined relative/absolute error,
//! `|a - b| / max(1, |a|, |b|)`, so gradients near zero are held to an
//! absolute tolerance and large gradients to a relative one.
//!
//! This module is ordinary (non-test) code so the acceptance suite can run
//! the same oracle the unit tests use.

use rand::Rng;

use super::{Tape, Tensor, TensorId};
use crate::error::Result;
use crate::rng;

/// Outcome of one finite-difference sweep.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    /// Worst combined error seen across all input elements.
    pub max_err: f64,
    /// Number of elements compared.
    pub checked: usize,
}

/// Compare tape gradients of `f` against central finite differences for
/// every element of every input. `f` must reduce to a scalar.
pub fn check<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[TensorId]) -> Result<TensorId>,
{
    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs.iter().map(|t| tape.leaf(t, true)).collect();
    let loss = f(&mut tape, &ids)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| tape.grad(id).map(|g| g.to_vec()).unwrap_or_default())
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = perturbed.iter().map(|t| tape.leaf(t, false)).collect();
        let loss = f(&mut tape, &ids)?;
        Ok(tape.values(loss)[0])
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut max_err = 0.0f64;
    let mut checked = 0usize;
    for (ti, input) in inputs.iter().enumerate() {
        for e in 0..input.data.len() {
            let orig = input.data[e];
            work[ti].data[e] = orig + h;
            let up = eval(&work)?;
            work[ti].data[e] = orig - h;
            let down = eval(&work)?;
            work[ti].data[e] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = analytic[ti][e];
            let err = (fd - an).abs() / 1.0f64.max(fd.abs()).max(an.abs());
            max_err = max_err.max(err);
            checked += 1;
        }
    }
    Ok(GradCheckReport { max_err, checked })
}

/// Step size used by the standard suite.
pub const FD_STEP: f64 = 1e-4;

/// One named finite-difference case; `run(seed)` returns the worst error.
pub struct KernelCase {
    pub name: &'static str,
    pub run: fn(u64) -> f64,
}

fn rt(rng: &mut impl Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor { shape, data: (0..n).map(|_| rng.gen_range(lo..hi)).collect() }
}

/// Reduce an arbitrary tensor to a scalar through a fixed random projection,
/// so the finite difference exercises every output element.
fn project(tape: &mut Tape<f64>, x: TensorId, seed: u64) -> Result<TensorId> {
    let n: usize = tape.shape(x).iter().product();
    let mut r = rng::stream(seed, "gradcheck-proj", &[]);
    let w = Tensor {
        shape: tape.shape(x).to_vec(),
        data: (0..n).map(|_| r.gen_range(-1.0..1.0)).collect(),
    };
    let wid = tape.leaf(&w, false);
    let prod = tape.mul(x, wid)?;
    Ok(tape.sum_all(prod))
}

macro_rules! fd_case {
    ($name:ident, $seed:ident, $inputs:expr, $body:expr) => {
        fn $name($seed: u64) -> f64 {
            let inputs: Vec<Tensor<f64>> = $inputs;
            let rep = check(&inputs, FD_STEP, $body).expect("gradcheck setup");
            rep.max_err
        }
    };
}

fd_case!(case_add_same, seed, {
    let mut r = rng::stream(seed, "fd-add", &[]);
    vec![rt(&mut r, vec![3, 4], -2.0, 2.0), rt(&mut r, vec![3, 4], -2.0, 2.0)]
}, |t, ids| {
    let y = t.add(ids[0], ids[1])?;
    project(t, y, seed)
});

fd_case!(case_add_row, seed, {
    let mut r = rng::stream(seed, "fd-addrow", &[]);
    vec![rt(&mut r, vec![3, 4], -2.0, 2.0), rt(&mut r, vec![4], -2.0, 2.0)]
}, |t, ids| {
    let y = t.add(ids[0], ids[1])?;
    project(t, y, seed)
});

fd_case!(case_sub, seed, {
    let mut r = rng::stream(seed, "fd-sub", &[]);
    vec![rt(&mut r, vec![2, 5], -2.0, 2.0), rt(&mut r, vec![2, 5], -2.0, 2.0)]
}, |t, ids| {
    let y = t.sub(ids[0], ids[1])?;
    project(t, y, seed)
});

fd_case!(case_mul_same, seed, {
    let mut r = rng::stream(seed, "fd-mul", &[]);
    vec![rt(&mut r, vec![3, 4], -2.0, 2.0), rt(&mut r, vec![3, 4], -2.0, 2.0)]
}, |t, ids| {
    let y = t.mul(ids[0], ids[1])?;
    project(t, y, seed)
});

fd_case!(case_mul_scalar, seed, {
    let mut r = rng::stream(seed, "fd-mulsc", &[]);
    vec![rt(&mut r, vec![6], -2.0, 2.0), rt(&mut r, vec![1], -2.0, 2.0)]
}, |t, ids| {
    let y = t.mul(ids[0], ids[1])?;
    project(t, y, seed)
});

fd_case!(case_scale_neg_addscalar, seed, {
    let mut r = rng::stream(seed, "fd-affine", &[]);
    vec![rt(&mut r, vec![7], -2.0, 2.0)]
}, |t, ids| {
    let y = t.scale(ids[0], 1.7);
    let y = t.neg(y);
    let y = t.add_scalar(y, 0.3);
    project(t, y, seed)
});

fd_case!(case_exp, seed, {
    let mut r = rng::stream(seed, "fd-exp", &[]);
    vec![rt(&mut r, vec![8], -1.5, 1.5)]
}, |t, ids| {
    let y = t.exp(ids[0]);
    project(t, y, seed)
});

fd_case!(case_clamp, seed, {
    // Keep samples away from the clamp boundaries; the subgradient there is
    // not a limit of finite differences.
    let mut r = rng::stream(seed, "fd-clamp", &[]);
    let data: Vec<f64> = (0..10)
        .map(|_| {
            let mut x: f64 = r.gen_range(-2.0..2.0);
            while (x.abs() - 1.0).abs() < 0.05 {
                x = r.gen_range(-2.0..2.0);
            }
            x
        })
        .collect();
    vec![Tensor { shape: vec![10], data }]
}, |t, ids| {
    let y = t.clamp(ids[0], -1.0, 1.0);
    project(t, y, seed)
});

fd_case!(case_minimum, seed, {
    // Resample until no pair sits near a tie.
    let mut r = rng::stream(seed, "fd-min", &[]);
    let mut a = rt(&mut r, vec![9], -2.0, 2.0);
    let mut b = rt(&mut r, vec![9], -2.0, 2.0);
    for i in 0..9 {
        while (a.data[i] - b.data[i]).abs() < 0.05 {
            a.data[i] = r.gen_range(-2.0..2.0);
            b.data[i] = r.gen_range(-2.0..2.0);
        }
    }
    vec![a, b]
}, |t, ids| {
    let y = t.minimum(ids[0], ids[1])?;
    project(t, y, seed)
});

fd_case!(case_matmul, seed, {
    let mut r = rng::stream(seed, "fd-mm", &[]);
    vec![rt(&mut r, vec![3, 4], -1.0, 1.0), rt(&mut r, vec![4, 5], -1.0, 1.0)]
}, |t, ids| {
    let y = t.matmul(ids[0], ids[1])?;
    project(t, y, seed)
});

fd_case!(case_matmul_nt, seed, {
    let mut r = rng::stream(seed, "fd-mmnt", &[]);
    vec![rt(&mut r, vec![3, 4], -1.0, 1.0), rt(&mut r, vec![5, 4], -1.0, 1.0)]
}, |t, ids| {
    let y = t.matmul_nt(ids[0], ids[1])?;
    project(t, y, seed)
});

fd_case!(case_gather, seed, {
    let mut r = rng::stream(seed, "fd-gather", &[]);
    vec![rt(&mut r, vec![6, 3], -1.0, 1.0)]
}, |t, ids| {
    // Repeated ids exercise scatter-add in the backward pass.
    let y = t.gather(ids[0], &[0, 2, 2, 5, 1])?;
    project(t, y, seed)
});

fd_case!(case_row_gather, seed, {
    let mut r = rng::stream(seed, "fd-rowg", &[]);
    vec![rt(&mut r, vec![4, 6], -1.0, 1.0)]
}, |t, ids| {
    let y = t.row_gather(ids[0], &[5, 0, 3, 3])?;
    project(t, y, seed)
});

fd_case!(case_take_rows, seed, {
    let mut r = rng::stream(seed, "fd-taker", &[]);
    vec![rt(&mut r, vec![5, 3], -1.0, 1.0)]
}, |t, ids| {
    let y = t.take_rows(ids[0], &[4, 1, 1])?;
    project(t, y, seed)
});

fd_case!(case_cols_gather, seed, {
    let mut r = rng::stream(seed, "fd-colsg", &[]);
    vec![rt(&mut r, vec![3, 7], -1.0, 1.0)]
}, |t, ids| {
    let y = t.cols_gather(ids[0], &[0, 6, 2, 2, 1, 5], 2)?;
    project(t, y, seed)
});

fd_case!(case_softmax, seed, {
    let mut r = rng::stream(seed, "fd-sm", &[]);
    vec![rt(&mut r, vec![3, 5], -3.0, 3.0)]
}, |t, ids| {
    let y = t.softmax(ids[0])?;
    project(t, y, seed)
});

fd_case!(case_log_softmax, seed, {
    let mut r = rng::stream(seed, "fd-lsm", &[]);
    vec![rt(&mut r, vec![3, 5], -3.0, 3.0)]
}, |t, ids| {
    let y = t.log_softmax(ids[0])?;
    project(t, y, seed)
});

fd_case!(case_layer_norm, seed, {
    let mut r = rng::stream(seed, "fd-ln", &[]);
    vec![
        rt(&mut r, vec![3, 6], -2.0, 2.0),
        rt(&mut r, vec![6], 0.5, 1.5),
        rt(&mut r, vec![6], -0.5, 0.5),
    ]
}, |t, ids| {
    let y = t.layer_norm(ids[0], ids[1], ids[2], 1e-5)?;
    project(t, y, seed)
});

fd_case!(case_gelu, seed, {
    let mut r = rng::stream(seed, "fd-gelu", &[]);
    vec![rt(&mut r, vec![10], -3.0, 3.0)]
}, |t, ids| {
    let y = t.gelu(ids[0]);
    project(t, y, seed)
});

fd_case!(case_causal_attention, seed, {
    let mut r = rng::stream(seed, "fd-attn", &[]);
    vec![
        rt(&mut r, vec![5, 4], -1.0, 1.0),
        rt(&mut r, vec![5, 4], -1.0, 1.0),
        rt(&mut r, vec![5, 4], -1.0, 1.0),
    ]
}, |t, ids| {
    let y = t.causal_attention(ids[0], ids[1], ids[2], 2)?;
    project(t, y, seed)
});

fd_case!(case_cross_entropy, seed, {
    let mut r = rng::stream(seed, "fd-ce", &[]);
    vec![rt(&mut r, vec![4, 6], -2.0, 2.0)]
}, |t, ids| {
    t.cross_entropy(ids[0], &[2, super::IGNORE_TARGET, 0, 5])
});

fd_case!(case_kl_sum, seed, {
    let mut r = rng::stream(seed, "fd-kl", &[]);
    vec![rt(&mut r, vec![3, 5], -2.0, 2.0)]
}, |t, ids| {
    let mut tr = rng::stream(seed, "fd-kl-target", &[]);
    let mut target = rt(&mut tr, vec![3, 5], 0.05, 1.0);
    for row in target.data.chunks_mut(5) {
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= total);
    }
    t.kl_sum(&target, ids[0])
});

fd_case!(case_reductions, seed, {
    let mut r = rng::stream(seed, "fd-red", &[]);
    vec![rt(&mut r, vec![3, 3], -2.0, 2.0), rt(&mut r, vec![3, 3], -2.0, 2.0)]
}, |t, ids| {
    let m = t.mean_all(ids[0]);
    let s = t.sum_all(ids[1]);
    let sc = t.scale(s, 0.25);
    t.add_n(&[m, sc])
});

/// The full kernel suite; every tape op appears in at least one case.
pub fn kernel_cases() -> Vec<KernelCase> {
    vec![
        KernelCase { name: "add", run: case_add_same },
        KernelCase { name: "add_broadcast_row", run: case_add_row },
        KernelCase { name: "sub", run: case_sub },
        KernelCase { name: "mul", run: case_mul_same },
        KernelCase { name: "mul_broadcast_scalar", run: case_mul_scalar },
        KernelCase { name: "scale_neg_add_scalar", run: case_scale_neg_addscalar },
        KernelCase { name: "exp", run: case_exp },
        KernelCase { name: "clamp", run: case_clamp },
        KernelCase { name: "minimum", run: case_minimum },
        KernelCase { name: "matmul", run: case_matmul },
        KernelCase { name: "matmul_nt", run: case_matmul_nt },
        KernelCase { name: "gather", run: case_gather },
        KernelCase { name: "row_gather", run: case_row_gather },
        KernelCase { name: "take_rows", run: case_take_rows },
        KernelCase { name: "cols_gather", run: case_cols_gather },
        KernelCase { name: "softmax", run: case_softmax },
        KernelCase { name: "log_softmax", run: case_log_softmax },
        KernelCase { name: "layer_norm", run: case_layer_norm },
        KernelCase { name: "gelu", run: case_gelu },
        KernelCase { name: "causal_attention", run: case_causal_attention },
        KernelCase { name: "cross_entropy", run: case_cross_entropy },
        KernelCase { name: "kl_sum", run: case_kl_sum },
        KernelCase { name: "sum_mean_addn", run: case_reductions },
    ]
}
