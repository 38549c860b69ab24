//! Central finite-difference verification of analytic gradients.
//!
//! Everything runs in double precision: single-precision rounding is the
//! same order as the h^2 truncation error, which makes f32 comparisons
//! meaningless.

use super::{Graph, NodeId};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

pub const FD_STEP: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradReport {
    pub op: String,
    pub max_rel_err: f64,
    pub tol: f64,
    pub pass: bool,
}

impl std::fmt::Display for GradReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:28} max_rel_err {:.3e} (tol {:.0e}) {}",
            self.op,
            self.max_rel_err,
            self.tol,
            if self.pass { "pass" } else { "FAIL" }
        )
    }
}

/// Relative error with an absolute-error fallback for near-zero gradients,
/// where the h^2 truncation noise would otherwise dominate the ratio.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs());
    let diff = (analytic - numeric).abs();
    if denom < 1e-3 {
        diff
    } else {
        diff / denom
    }
}

/// Compare analytic gradients of `build` (inputs -> scalar loss) against
/// central differences.
///
/// `gen_inputs` draws one set of input tensors per trial. When
/// `max_elements` is set, only that many randomly chosen coordinates per
/// input are perturbed, which keeps composed-network checks affordable; the
/// coordinate choice is deterministic in the trial seed.
pub fn check<G, F>(
    op: &str,
    trials: u32,
    tol: f64,
    max_elements: Option<usize>,
    gen_inputs: G,
    build: F,
) -> GradReport
where
    G: Fn(&mut ChaCha20Rng) -> Vec<Tensor<f64>>,
    F: Fn(&mut Graph<f64>, &[NodeId]) -> crate::Result<NodeId>,
{
    let mut max_rel = 0.0f64;
    for trial in 0..trials {
        let mut rng = ChaCha20Rng::seed_from_u64(0xC0FFEE ^ trial as u64);
        let inputs = gen_inputs(&mut rng);

        let eval = |tensors: &[Tensor<f64>]| -> f64 {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = tensors.iter().map(|t| g.input(t.clone())).collect();
            let loss = build(&mut g, &ids).expect("gradcheck graph must build");
            g.value(loss).data()[0]
        };

        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let loss = build(&mut g, &ids).expect("gradcheck graph must build");
        let grads = g.backward(loss).expect("gradcheck backward must run");

        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads.wrt(ids[k]);
            let coords: Vec<usize> = match max_elements {
                Some(cap) if input.len() > cap => {
                    (0..cap).map(|_| rng.gen_range(0..input.len())).collect()
                }
                _ => (0..input.len()).collect(),
            };
            for i in coords {
                let a = analytic.map_or(0.0, |t| t.data()[i]);
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[i] += FD_STEP;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[i] -= FD_STEP;
                let n = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
                max_rel = max_rel.max(rel_err(a, n));
            }
        }
    }
    GradReport {
        op: op.to_string(),
        max_rel_err: max_rel,
        tol,
        pass: max_rel < tol,
    }
}

fn uniform(rng: &mut ChaCha20Rng, dims: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = dims.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(dims, data).unwrap()
}

/// Uniform magnitudes in [0.2, 1) with random signs: keeps samples at least
/// 0.2 away from the relu/abs kink at 0 so finite differences are valid.
fn away_from_zero(rng: &mut ChaCha20Rng, dims: &[usize]) -> Tensor<f64> {
    let n: usize = dims.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.gen_range(0.2..1.0);
            if rng.gen::<bool>() {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::from_vec(dims, data).unwrap()
}

/// Weighted-sum loss: sum(x * w) with fixed per-trial weights, so a
/// transposed or misrouted gradient cannot cancel out.
fn weighted_loss(
    g: &mut Graph<f64>,
    out: NodeId,
    rng_seed: u64,
) -> crate::Result<NodeId> {
    let dims = g.dims(out).to_vec();
    let mut wrng = ChaCha20Rng::seed_from_u64(rng_seed);
    let w = {
        let n: usize = dims.iter().product();
        let data = (0..n).map(|_| wrng.gen_range(0.5..1.5)).collect();
        Tensor::from_vec(&dims, data).unwrap()
    };
    let wn = g.constant(w);
    let prod = g.mul(out, wn)?;
    Ok(g.sum_all(prod))
}

const TOL: f64 = 1e-4;
const TRIALS: u32 = 10;

/// Run the finite-difference check for every primitive; ten seeds each.
pub fn run_all() -> Vec<GradReport> {
    let mut reports = Vec::new();
    let mut push = |r: GradReport| reports.push(r);

    push(check("add (broadcast)", TRIALS, TOL, None,
        |rng| vec![uniform(rng, &[2, 3], -1.0, 1.0), uniform(rng, &[1, 3], -1.0, 1.0)],
        |g, ids| { let y = g.add(ids[0], ids[1])?; weighted_loss(g, y, 1) }));
    push(check("sub", TRIALS, TOL, None,
        |rng| vec![uniform(rng, &[2, 3], -1.0, 1.0), uniform(rng, &[2, 3], -1.0, 1.0)],
        |g, ids| { let y = g.sub(ids[0], ids[1])?; weighted_loss(g, y, 2) }));
    push(check("mul (broadcast)", TRIALS, TOL, None,
        |rng| vec![uniform(rng, &[2, 3], -1.0, 1.0), uniform(rng, &[2, 1], -1.0, 1.0)],
        |g, ids| { let y = g.mul(ids[0], ids[1])?; weighted_loss(g, y, 3) }));
    push(check("div", TRIALS, TOL, None,
        |rng| vec![uniform(rng, &[2, 3], -1.0, 1.0), uniform(rng, &[2, 3], 0.5, 2.0)],
        |g, ids| { let y = g.div(ids[0], ids[1])?; weighted_loss(g, y, 4) }));
    push(check("scale", TRIALS, TOL, None,
        |rng| vec![uniform(rng, &[4], -1.0, 1.0)],
        |g, ids| { let y = g.scale(ids[0], -2.5); weighted_loss(g, y, 5) }));
    push(check("add_scalar", TRIALS, TOL, None,
        |rng| vec![uniform(rng, &[4], -1.0, 1.0)],
        |g, ids| { let y = g.add_scalar(ids[0], 0.7); weighted_loss(g, y, 6) }));
    push(check("relu", TRIALS, 1e-6, None,
        |rng| vec![away_from_zero(rng, &[3, 4])],
        |g, ids| { let y = g.relu(ids[0]); weighted_loss(g, y, 7) }));
    push(check("gelu", TRIALS, TOL, None,
        |rng| vec![uniform(rng, &[3, 4], -2.0, 2.0)],
        |g, ids| { let y = g.gelu(ids[0]); weighted_loss(g, y, 8) }));
    push(check("abs", TRIALS, TOL, None,
        |rng| vec![away_from_zero(rng, &[3, 4])],
        |g, ids| { let y = g.abs(ids[0]); weighted_loss(g, y, 9) }));
    push(check("ln", TRIALS, TOL, None,
        |rng| vec![uniform(rng, &[5], 0.5, 2.0)],
        |g, ids| { let y = g.ln(ids[0]); weighted_loss(g, y, 10) }));
    push(check("clamp_min", TRIALS, TOL, None,
        // keep samples away from the clamp threshold 0.3
        |rng| {
            let n = 6;
            let data = (0..n)
                .map(|_| {
                    if rng.gen::<bool>() {
                        rng.gen_range(0.4..1.0)
                    } else {
                        rng.gen_range(-1.0..0.2)
                    }
                })
                .collect();
            vec![Tensor::from_vec(&[n], data).unwrap()]
        },
        |g, ids| { let y = g.clamp_min(ids[0], 0.3); weighted_loss(g, y, 11) }));
    push(check("reshape+permute", TRIALS, TOL, None,
        |rng| vec![uniform(rng, &[2, 3, 4], -1.0, 1.0)],
        |g, ids| {
            let p = g.permute(ids[0], &[2, 0, 1])?;
            let r = g.reshape(p, &[4, 6])?;
            weighted_loss(g, r, 12)
        }));
    push(check("concat", TRIALS, TOL, None,
        |rng| vec![uniform(rng, &[2, 2], -1.0, 1.0), uniform(rng, &[2, 3], -1.0, 1.0)],
        |g, ids| { let y = g.concat(&[ids[0], ids[1]], 1)?; weighted_loss(g, y, 13) }));
    push(check("slice", TRIALS, TOL, None,
        |rng| vec![uniform(rng, &[3, 5], -1.0, 1.0)],
        |g, ids| { let y = g.slice(ids[0], 1, 1, 3)?; weighted_loss(g, y, 14) }));
    push(check("linear", TRIALS, TOL, None,
        |rng| vec![
            uniform(rng, &[3, 4], -1.0, 1.0),
            uniform(rng, &[4, 2], -1.0, 1.0),
            uniform(rng, &[2], -1.0, 1.0),
        ],
        |g, ids| { let y = g.linear(ids[0], ids[1], ids[2])?; weighted_loss(g, y, 15) }));
    push(check("conv2d", TRIALS, TOL, None,
        |rng| vec![
            uniform(rng, &[2, 2, 4, 4], -1.0, 1.0),
            uniform(rng, &[3, 2, 3, 3], -1.0, 1.0),
            uniform(rng, &[3], -1.0, 1.0),
        ],
        |g, ids| { let y = g.conv2d(ids[0], ids[1], ids[2])?; weighted_loss(g, y, 16) }));
    push(check("matmul", TRIALS, TOL, None,
        |rng| vec![uniform(rng, &[2, 3, 4], -1.0, 1.0), uniform(rng, &[2, 4, 2], -1.0, 1.0)],
        |g, ids| { let y = g.matmul(ids[0], ids[1])?; weighted_loss(g, y, 17) }));
    push(check("batch_norm (train)", TRIALS, TOL, None,
        |rng| vec![
            uniform(rng, &[2, 3, 4, 4], -1.0, 1.0),
            uniform(rng, &[3], 0.5, 1.5),
            uniform(rng, &[3], -0.5, 0.5),
        ],
        |g, ids| { let y = g.batch_norm_train(ids[0], ids[1], ids[2], 1e-5)?; weighted_loss(g, y, 18) }));
    push(check("batch_norm (infer)", TRIALS, TOL, None,
        |rng| vec![
            uniform(rng, &[2, 3, 4, 4], -1.0, 1.0),
            uniform(rng, &[3], 0.5, 1.5),
            uniform(rng, &[3], -0.5, 0.5),
        ],
        |g, ids| {
            let mean = g.constant(uniform(&mut ChaCha20Rng::seed_from_u64(40), &[3], -0.2, 0.2));
            let var = g.constant(uniform(&mut ChaCha20Rng::seed_from_u64(41), &[3], 0.5, 1.5));
            let y = g.batch_norm_infer(ids[0], ids[1], ids[2], mean, var, 1e-5)?;
            weighted_loss(g, y, 19)
        }));
    push(check("layer_norm", TRIALS, TOL, None,
        |rng| vec![
            uniform(rng, &[3, 5], -1.0, 1.0),
            uniform(rng, &[5], 0.5, 1.5),
            uniform(rng, &[5], -0.5, 0.5),
        ],
        |g, ids| { let y = g.layer_norm(ids[0], ids[1], ids[2], 1e-5)?; weighted_loss(g, y, 20) }));
    push(check("softmax", TRIALS, TOL, None,
        |rng| vec![uniform(rng, &[3, 5], -2.0, 2.0)],
        |g, ids| { let y = g.softmax(ids[0])?; weighted_loss(g, y, 21) }));
    push(check("mean_all", TRIALS, TOL, None,
        |rng| vec![uniform(rng, &[3, 4], -1.0, 1.0)],
        |g, ids| Ok(g.mean_all(ids[0]))));
    push(check("sum_all", TRIALS, TOL, None,
        |rng| vec![uniform(rng, &[3, 4], -1.0, 1.0)],
        |g, ids| Ok(g.sum_all(ids[0]))));
    push(check("avg_pool2", TRIALS, TOL, None,
        |rng| vec![uniform(rng, &[1, 2, 5, 6], -1.0, 1.0)],
        |g, ids| { let y = g.avg_pool2(ids[0])?; weighted_loss(g, y, 22) }));
    push(check("gauss_conv2d", TRIALS, TOL, None,
        |rng| vec![uniform(rng, &[1, 1, 12, 12], -1.0, 1.0)],
        |g, ids| {
            let win = crate::metrics::gaussian_window();
            let y = g.gauss_conv2d(ids[0], &win)?;
            weighted_loss(g, y, 23)
        }));
    push(check("gather_rows", TRIALS, TOL, None,
        |rng| vec![uniform(rng, &[5, 3], -1.0, 1.0)],
        |g, ids| {
            let y = g.gather_rows(ids[0], &[0, 2, 2, 4, 1])?;
            weighted_loss(g, y, 24)
        }));
    push(check("masked_add", TRIALS, TOL, None,
        |rng| vec![uniform(rng, &[2, 4], -1.0, 1.0)],
        |g, ids| {
            let mask = Tensor::from_vec(&[1, 4], vec![0.0, -1e9, 0.0, -1e9]).unwrap();
            let m = g.masked_add(ids[0], mask)?;
            let s = g.softmax(m)?;
            weighted_loss(g, s, 25)
        }));
    push(check("dropout", TRIALS, TOL, None,
        |rng| vec![uniform(rng, &[4, 4], -1.0, 1.0)],
        |g, ids| { let y = g.dropout(ids[0], 0.3, 77)?; weighted_loss(g, y, 26) }));

    reports
}
