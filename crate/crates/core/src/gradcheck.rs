//! Central finite-difference verification of graph gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::graph::{GradGraph, Var};
use crate::tensor::Tensor;

/// Default perturbation for [`finite_difference_check`].
pub const DEFAULT_EPS: f64 = 1e-5;

/// Compare analytic gradients of a scalar-valued builder against central
/// finite differences, coordinate by coordinate.
///
/// `build` must construct the same deterministic computation every time it is
/// called; it receives one leaf `Var` per entry of `params`. Returns the
/// maximum relative error over all parameter coordinates, with the
/// denominator floored at 1e-8 so near-zero gradients do not blow up the
/// ratio.
pub fn finite_difference_check<F>(build: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut GradGraph, &[Var]) -> Result<Var>,
{
    finite_difference_check_steps(build, params, &[eps])
}

/// Like [`finite_difference_check`] but scores each coordinate by its best
/// agreement over several step sizes. Deeply composed objectives have no
/// single workable step: small steps drown near-zero gradients in subtraction
/// noise while large steps pick up truncation error on saturated units. A
/// wrong gradient still fails at every step size.
pub fn finite_difference_check_steps<F>(build: F, params: &[Tensor], steps: &[f64]) -> Result<f64>
where
    F: Fn(&mut GradGraph, &[Var]) -> Result<Var>,
{
    if steps.is_empty() {
        return Err(Error::Usage("need at least one finite-difference step".into()));
    }
    let mut g = GradGraph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let loss = build(&mut g, &vars)?;
    if g.value(loss).numel() != 1 {
        return Err(Error::Usage(format!(
            "finite_difference_check needs a scalar objective, got shape {:?}",
            g.value(loss).shape()
        )));
    }
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| g.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = GradGraph::new();
        let vs: Vec<Var> = ps.iter().map(|p| g.leaf(p.clone())).collect();
        let l = build(&mut g, &vs)?;
        Ok(g.value(l).item())
    };

    let mut max_rel = 0.0_f64;
    for (pi, p) in params.iter().enumerate() {
        for i in 0..p.numel() {
            let a = analytic[pi].data()[i];
            let mut best = f64::INFINITY;
            for &eps in steps {
                let mut plus = params.to_vec();
                plus[pi].data_mut()[i] += eps;
                let mut minus = params.to_vec();
                minus[pi].data_mut()[i] -= eps;
                let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
                let denom = a.abs().max(numeric.abs()).max(1e-8);
                best = best.min((a - numeric).abs() / denom);
            }
            max_rel = max_rel.max(best);
        }
    }
    Ok(max_rel)
}

/// Result of checking one component's gradients.
#[derive(Clone, Debug)]
pub struct ComponentCheck {
    pub name: String,
    pub max_rel_error: f64,
}

/// Tolerance every component must meet.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Step pair for deeply composed objectives: near-zero gradients are
/// noise-limited at the small step, saturated units truncation-limited at
/// the large one; each coordinate is scored at its better step.
const DEEP_STEPS: [f64; 2] = [DEFAULT_EPS, 3e-4];

type CaseBuilder<'a> = Box<dyn Fn(&mut GradGraph, &[Var]) -> Result<Var> + 'a>;

fn run_component<F>(
    out: &mut Vec<ComponentCheck>,
    filter: Option<&str>,
    name: &str,
    seeds: u64,
    steps: &[f64],
    build_case: F,
) where
    F: Fn(&mut ChaCha12Rng) -> (Vec<Tensor>, CaseBuilder<'static>),
{
    if let Some(f) = filter {
        if !name.contains(f) {
            return;
        }
    }
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut rng = ChaCha12Rng::seed_from_u64(0x4311 + seed);
        let (params, builder) = build_case(&mut rng);
        let err = finite_difference_check_steps(|g, vars| builder(g, vars), &params, steps)
            .unwrap_or(f64::INFINITY);
        worst = worst.max(err);
    }
    out.push(ComponentCheck { name: name.to_string(), max_rel_error: worst });
}

fn rand_mat(rng: &mut ChaCha12Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_parts(
        vec![rows, cols],
        (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
}

/// Finite-difference verification of every layer plus both end-to-end model
/// variants, seeded and deterministic. `filter` keeps only component names
/// containing the given substring.
pub fn check_components(seeds: u64, filter: Option<&str>) -> Vec<ComponentCheck> {
    use crate::graph::Boundary;
    use crate::nn::{
        bi_gru_encode, decode_global, decode_toeplitz, forward_pass, global_attention_step,
        gru_cell, slice_encode, vars_from_flat, AttentionKind, DecodeMode, GlobalAttnVars,
        GruVars, InputFeeding, ModelConfig, ModelParams,
    };
    use crate::synth::StackSample;

    let mut out = Vec::new();
    run_component(&mut out, filter, "matmul", seeds, &[DEFAULT_EPS], |rng| {
        let a = rand_mat(rng, 3, 4);
        let b = rand_mat(rng, 4, 2);
        (vec![a, b], Box::new(|g, v| {
            let c = g.matmul(v[0], v[1])?;
            Ok(g.sum(c))
        }))
    });
    run_component(&mut out, filter, "elementwise", seeds, &[DEFAULT_EPS], |rng| {
        let a = rand_mat(rng, 3, 3);
        let b = rand_mat(rng, 3, 3);
        (vec![a, b], Box::new(|g, v| {
            let sum = g.add(v[0], v[1])?;
            let diff = g.sub(v[0], v[1])?;
            let prod = g.hadamard(sum, diff)?;
            let scaled = g.scale(prod, 0.75, -0.1);
            let sig = g.sigmoid(scaled);
            let th = g.tanh(sig);
            Ok(g.sum(th))
        }))
    });
    run_component(&mut out, filter, "concat_slice", seeds, &[DEFAULT_EPS], |rng| {
        let a = rand_mat(rng, 2, 3);
        let b = rand_mat(rng, 3, 3);
        let c = rand_mat(rng, 5, 2);
        (vec![a, b, c], Box::new(|g, v| {
            let rows = g.concat_rows(&[v[0], v[1]])?;
            let wide = g.concat_cols(&[rows, v[2]])?;
            let cut = g.slice_rows(wide, 1, 3)?;
            let sq = g.hadamard(cut, cut)?;
            Ok(g.sum(sq))
        }))
    });
    run_component(&mut out, filter, "add_row_reshape", seeds, &[DEFAULT_EPS], |rng| {
        let m = rand_mat(rng, 4, 3);
        let r = rand_mat(rng, 1, 3);
        (vec![m, r], Box::new(|g, v| {
            let shifted = g.add_row(v[0], v[1])?;
            let flat = g.reshape(shifted, &[1, 12])?;
            let sq = g.hadamard(flat, flat)?;
            Ok(g.sum(sq))
        }))
    });
    run_component(&mut out, filter, "softmax", seeds, &[DEFAULT_EPS], |rng| {
        let x = rand_mat(rng, 2, 5);
        let w = rand_mat(rng, 2, 5);
        (vec![x, w], Box::new(|g, v| {
            let y = g.softmax(v[0])?;
            let weighted = g.hadamard(y, v[1])?;
            Ok(g.sum(weighted))
        }))
    });
    for boundary in [Boundary::ZeroPad, Boundary::Renormalize] {
        let name = format!("conv1d_band_{boundary}");
        run_component(&mut out, filter, &name, seeds, &[DEFAULT_EPS], move |rng| {
            let t = rng.gen_range(3..8);
            let d = rng.gen_range(0..=2);
            let h = rand_mat(rng, t, 3);
            // positive kernel entries keep every renormalizer away from zero
            let k = Tensor::vector((0..2 * d + 1).map(|_| rng.gen_range(0.05..1.0)).collect());
            let w = rand_mat(rng, t, 3);
            (vec![h, k, w], Box::new(move |g, v| {
                let outv = g.conv1d_band(v[0], v[1], boundary)?;
                let weighted = g.hadamard(outv, v[2])?;
                Ok(g.sum(weighted))
            }))
        });
    }
    run_component(&mut out, filter, "cross_entropy", seeds, &[DEFAULT_EPS], |rng| {
        let t = rng.gen_range(1..6);
        let logits = rand_mat(rng, t, 3);
        let labels: Vec<usize> = (0..t).map(|_| rng.gen_range(0..3)).collect();
        (vec![logits], Box::new(move |g, v| g.cross_entropy(v[0], &labels)))
    });
    run_component(&mut out, filter, "slice_encoder", seeds, &[DEFAULT_EPS], |rng| {
        let x = rand_mat(rng, 4, 3);
        let w = rand_mat(rng, 3, 4);
        let b = rand_mat(rng, 1, 4);
        (vec![x, w, b], Box::new(|g, v| {
            let out = slice_encode(g, v[0], v[1], v[2])?;
            let sq = g.hadamard(out, out)?;
            Ok(g.sum(sq))
        }))
    });
    let gru_from = |v: &[Var], o: usize| GruVars {
        w_z: v[o],
        w_r: v[o + 1],
        w_h: v[o + 2],
        u_z: v[o + 3],
        u_r: v[o + 4],
        u_h: v[o + 5],
        b_z: v[o + 6],
        b_r: v[o + 7],
        b_h: v[o + 8],
    };
    let push_gru = |params: &mut Vec<Tensor>, rng: &mut ChaCha12Rng, input: usize, hidden: usize| {
        for _ in 0..3 {
            params.push(rand_mat(rng, input, hidden));
        }
        for _ in 0..3 {
            params.push(rand_mat(rng, hidden, hidden));
        }
        for _ in 0..3 {
            params.push(rand_mat(rng, 1, hidden));
        }
    };
    run_component(&mut out, filter, "gru_cell", seeds, &[DEFAULT_EPS], |rng| {
        let mut params = vec![rand_mat(rng, 1, 3), rand_mat(rng, 1, 4)];
        push_gru(&mut params, rng, 3, 4);
        (params, Box::new(move |g, v| {
            let gru = gru_from(v, 2);
            let h = gru_cell(g, v[0], v[1], &gru)?;
            let sq = g.hadamard(h, h)?;
            Ok(g.sum(sq))
        }))
    });
    run_component(&mut out, filter, "bi_gru", seeds, &[DEFAULT_EPS], |rng| {
        let mut params = vec![rand_mat(rng, 5, 3)];
        push_gru(&mut params, rng, 3, 4);
        push_gru(&mut params, rng, 3, 4);
        (params, Box::new(move |g, v| {
            let enc = bi_gru_encode(g, v[0], &gru_from(v, 1), &gru_from(v, 10), 4, false)?;
            let sq = g.hadamard(enc, enc)?;
            Ok(g.sum(sq))
        }))
    });
    run_component(&mut out, filter, "global_attention_step", seeds, &[DEFAULT_EPS], |rng| {
        let params = vec![
            rand_mat(rng, 5, 6), // encodings
            rand_mat(rng, 1, 4), // previous decoder state
            rand_mat(rng, 4, 4),
            rand_mat(rng, 6, 4),
            rand_mat(rng, 1, 4),
            rand_mat(rng, 4, 1),
        ];
        (params, Box::new(|g, v| {
            let attn = GlobalAttnVars { w: v[2], u: v[3], b: v[4], v: v[5] };
            let (c, alpha) = global_attention_step(g, v[0], v[1], &attn)?;
            let cs = g.hadamard(c, c)?;
            let a_sum = g.sum(alpha);
            let c_sum = g.sum(cs);
            let mixed = g.hadamard(a_sum, c_sum)?;
            Ok(g.sum(mixed))
        }))
    });
    run_component(&mut out, filter, "decode_toeplitz", seeds, &[DEFAULT_EPS], |rng| {
        let t = 4;
        let params = vec![rand_mat(rng, t, 5), rand_mat(rng, 8, 3), rand_mat(rng, 1, 3)];
        let labels: Vec<usize> = (0..t).map(|_| rng.gen_range(0..3)).collect();
        (params, Box::new(move |g, v| {
            let logits = decode_toeplitz(
                g,
                v[0],
                v[1],
                v[2],
                InputFeeding::Probabilities,
                DecodeMode::FreeRunning,
                None,
            )?;
            g.cross_entropy(logits, &labels)
        }))
    });
    run_component(&mut out, filter, "decode_global_free_running", seeds.min(10), &DEEP_STEPS, |rng| {
        let (t, e, h_dec) = (3, 4, 3);
        let mut params = vec![rand_mat(rng, t, e)];
        params.push(rand_mat(rng, h_dec, h_dec));
        params.push(rand_mat(rng, e, h_dec));
        params.push(rand_mat(rng, 1, h_dec));
        params.push(rand_mat(rng, h_dec, 1));
        push_gru(&mut params, rng, e + 3, h_dec);
        params.push(rand_mat(rng, h_dec, 3));
        params.push(rand_mat(rng, 1, 3));
        let labels: Vec<usize> = (0..t).map(|_| rng.gen_range(0..3)).collect();
        (params, Box::new(move |g, v| {
            let attn = GlobalAttnVars { w: v[1], u: v[2], b: v[3], v: v[4] };
            let gru = gru_from(v, 5);
            let (logits, _) = decode_global(
                g,
                v[0],
                &attn,
                &gru,
                v[14],
                v[15],
                3,
                InputFeeding::Probabilities,
                DecodeMode::FreeRunning,
                None,
            )?;
            g.cross_entropy(logits, &labels)
        }))
    });
    for kind in [AttentionKind::Toeplitz, AttentionKind::Global] {
        let cfg = ModelConfig {
            attention: kind,
            d: 1,
            boundary: Boundary::ZeroPad,
            f_raw: 3,
            f_enc: 3,
            h_enc: 4,
            h_dec: 4,
            input_feeding: InputFeeding::Probabilities,
            slice_context_only: false,
        };
        let name = format!("end_to_end_{kind}");
        run_component(&mut out, filter, &name, seeds, &DEEP_STEPS, move |rng| {
            let reference = ModelParams::zeros(&cfg);
            // random values at realistic initialization scale, shapes preserved
            let flat: Vec<Tensor> = reference
                .named()
                .into_iter()
                .map(|(_, t)| {
                    let data = (0..t.numel()).map(|_| rng.gen_range(-0.5..0.5)).collect();
                    Tensor::from_parts(t.shape().to_vec(), data)
                })
                .collect();
            let t = 5;
            let features = (0..t)
                .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let labels = (0..t).map(|i| (3 * i / t).min(2)).collect();
            let stack = StackSample { id: "fd".into(), features, labels };
            let cfg = cfg.clone();
            (flat, Box::new(move |g, vars| {
                let mv = vars_from_flat(&cfg, vars);
                let out = forward_pass(&cfg, g, &mv, &stack, DecodeMode::TeacherForcing)?;
                g.cross_entropy(out.logits, &stack.labels)
            }))
        });
    }
    out
}
