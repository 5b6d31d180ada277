//! Finite-difference verification of every analytic gradient, in `f64`.

use std::fmt;

use rand::Rng;

use crate::loss::{
    contrastive_loss, full_loss_backward, log_terms, BatchEmbeddings, LossKind, ScaledSimilarities,
};
use crate::model::{init_encoder, Architecture, EncoderConfig, EncoderState};
use crate::seed;
use crate::tensor::{finite_difference_gradient, max_relative_error, Tape, Tensor, Var};
use crate::Result;

pub const OP_TOLERANCE: f64 = 1e-6;
pub const EMBEDDING_TOLERANCE: f64 = 1e-5;
pub const ENCODER_TOLERANCE: f64 = 1e-4;
/// Allowed deviation of the finite-difference positive gradient from −1.
pub const POSITIVE_GRAD_TOLERANCE: f64 = 1e-3;
const STEP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_error <= self.tolerance
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {:<36} max error {:.3e} (tolerance {:.0e})",
            if self.passed() { "ok" } else { "FAIL" },
            self.name,
            self.max_error,
            self.tolerance
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradcheckReport {
    pub checks: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| !c.passed()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        let failed = self.failures().len();
        write!(f, "{} checks, {} failed", self.checks.len(), failed)
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut seed::Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("sized")
}

fn unit_rows(n: usize, d: usize, rng: &mut seed::Rng) -> Tensor<f64> {
    let mut t = uniform(&[n, d], -1.0, 1.0, rng);
    for row in t.data_mut().chunks_mut(d) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    t
}

/// Compares tape gradients of `Σ probe ⊙ op(inputs)` against central differences
/// for every input.
pub fn check_op(
    name: &str,
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<CheckResult> {
    let out_shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        tape.value(out).shape().to_vec()
    };
    let len: usize = out_shape.iter().product();
    let probe = Tensor::new(
        out_shape.as_slice(),
        (0..len).map(|i| ((i as f64 + 1.0) * 0.7548776662).sin()).collect(),
    )?;

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let grads = tape.backward_with(out, probe.clone())?;

    let objective = |values: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars).expect("forward succeeded once");
        tape.value(out).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
    };

    let mut worst = 0.0f64;
    for k in 0..inputs.len() {
        let analytic = grads
            .get(vars[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        let numeric = finite_difference_gradient(
            |x| {
                let mut vals = inputs.to_vec();
                vals[k] = x.clone();
                objective(&vals)
            },
            &inputs[k],
            STEP,
        );
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    Ok(CheckResult {
        name: name.to_string(),
        max_error: worst,
        tolerance: OP_TOLERANCE,
    })
}

/// Every tape op on small random inputs.
pub fn tensor_op_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = seed::rng(seed, &[0x09]);
    let r = &mut rng;
    let a = uniform(&[3, 4], -1.0, 1.0, r);
    let b = uniform(&[4, 5], -1.0, 1.0, r);
    let c = uniform(&[3, 4], -1.0, 1.0, r);
    let img = uniform(&[2, 3, 6, 6], -1.0, 1.0, r);
    let kernel = uniform(&[4, 3, 3, 3], -0.5, 0.5, r);
    let bias4 = uniform(&[4], -0.5, 0.5, r);
    let bias5 = uniform(&[5], -0.5, 0.5, r);
    let labels = [1usize, 4, 0];

    let mut out = vec![
        check_op("matmul", &[a.clone(), b.clone()], |t, v| t.matmul(v[0], v[1]))?,
        check_op("transpose", &[a.clone()], |t, v| t.transpose(v[0]))?,
        check_op("add", &[a.clone(), c.clone()], |t, v| t.add(v[0], v[1]))?,
        check_op("mul", &[a.clone(), c.clone()], |t, v| t.mul(v[0], v[1]))?,
        check_op("scale", &[a.clone()], |t, v| Ok(t.scale(v[0], -2.5)))?,
        check_op("relu", &[a.clone()], |t, v| Ok(t.relu(v[0])))?,
        check_op("l2_normalize_rows", &[a.clone()], |t, v| t.l2_normalize_rows(v[0], 1e-12))?,
        check_op("sum", &[a.clone()], |t, v| Ok(t.sum(v[0])))?,
        check_op("mean", &[a.clone()], |t, v| Ok(t.mean(v[0])))?,
        check_op("reshape", &[a.clone()], |t, v| t.reshape(v[0], &[2, 6]))?,
        check_op("conv2d", &[img.clone(), kernel.clone()], |t, v| t.conv2d(v[0], v[1], 1, 1))?,
        check_op("conv2d_stride2_nopad", &[img.clone(), kernel], |t, v| t.conv2d(v[0], v[1], 2, 0))?,
        check_op("channel_bias", &[uniform(&[2, 4, 3, 3], -1.0, 1.0, r), bias4], |t, v| {
            t.channel_bias(v[0], v[1])
        })?,
        check_op("max_pool2x2", &[img.clone()], |t, v| t.max_pool2x2(v[0]))?,
        check_op("global_avg_pool", &[img], |t, v| t.global_avg_pool(v[0]))?,
        check_op("affine", &[a.clone(), b, bias5], |t, v| t.affine(v[0], v[1], v[2]))?,
        check_op("softmax_cross_entropy", &[uniform(&[3, 5], -2.0, 2.0, r)], |t, v| {
            t.softmax_cross_entropy(v[0], &labels)
        })?,
    ];
    out.push(check_op("l2_normalize_rows_small", &[a.clone()], |t, v| {
        let s = t.scale(v[0], 0.01);
        t.l2_normalize_rows(s, 1e-12)
    })?);
    Ok(out)
}

fn random_sims(n: usize, d: usize, with_aux: bool, tau: f64, rng: &mut seed::Rng) -> Result<ScaledSimilarities> {
    let x = unit_rows(n, d, rng);
    let y = unit_rows(n, d, rng);
    let z = with_aux.then(|| unit_rows(n, d, rng));
    ScaledSimilarities::from_rows(&x, &y, z.as_ref(), tau)
}

/// Analytic similarity-level gradients against differences of the batch loss.
pub fn similarity_grad_check(kind: LossKind, with_aux: bool, seed: u64) -> Result<CheckResult> {
    let mut rng = seed::rng(seed, &[0x51, with_aux as u64]);
    let sims = random_sims(5, 8, with_aux, 0.1, &mut rng)?;
    let report = contrastive_loss(&sims, kind)?;
    let mut worst = 0.0f64;
    for sk in sims.kinds() {
        let analytic = report.grads.matrix(sk).expect("present kind").clone();
        let numeric = finite_difference_gradient(
            |m| {
                let mut s = sims.clone();
                *s.matrix_mut(sk).expect("present kind") = m.clone();
                contrastive_loss(&s, kind).expect("valid sims").total
            },
            sims.matrix(sk).expect("present kind"),
            STEP,
        );
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    Ok(CheckResult {
        name: format!(
            "{}_similarity_grads{}",
            loss_name(kind),
            if with_aux { "" } else { "_two_view" }
        ),
        max_error: worst,
        tolerance: OP_TOLERANCE,
    })
}

fn loss_name(kind: LossKind) -> &'static str {
    match kind {
        LossKind::GntXent => "gnt_xent",
        LossKind::NtXent => "nt_xent",
    }
}

/// Largest deviation from −1 of the finite-difference gradient of each GNT-Xent
/// log-term with respect to its scaled positive, over random batches.
pub fn positive_gradient_check(seed: u64) -> Result<CheckResult> {
    let mut rng = seed::rng(seed, &[0x77]);
    let mut worst = 0.0f64;
    for (b, &n) in [2usize, 4, 8, 16].iter().cycle().take(8).enumerate() {
        let d = if b % 2 == 0 { 8 } else { 32 };
        let sims = random_sims(n, d, true, 0.1, &mut rng)?;
        for term in log_terms(n, true) {
            let mut up = sims.clone();
            *up.get_mut(term.positive) += 1e-5;
            let mut down = sims.clone();
            *down.get_mut(term.positive) -= 1e-5;
            let fd = (term.value(&up, LossKind::GntXent) - term.value(&down, LossKind::GntXent)) / 2e-5;
            worst = worst.max((fd + 1.0).abs());
        }
    }
    Ok(CheckResult {
        name: "gnt_xent_positive_grad_is_minus_one".into(),
        max_error: worst,
        tolerance: POSITIVE_GRAD_TOLERANCE,
    })
}

/// Unnormalized rows → L2 normalization → batch loss, checked end to end.
pub fn embedding_grad_check(kind: LossKind, seed: u64) -> Result<CheckResult> {
    let mut rng = seed::rng(seed, &[0xe6]);
    let (n, d, tau) = (4, 6, 0.1);
    let raw: Vec<Tensor<f64>> = (0..3).map(|_| uniform(&[n, d], -1.0, 1.0, &mut rng)).collect();

    let loss_of = |rows: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let normed: Vec<Tensor<f64>> = rows
            .iter()
            .map(|r| {
                let v = tape.constant(r.clone());
                let u = tape.l2_normalize_rows(v, 1e-12)?;
                Ok(tape.value(u).clone())
            })
            .collect::<Result<_>>()?;
        let emb = BatchEmbeddings::new(normed[0].clone(), normed[1].clone(), Some(normed[2].clone()))?;
        Ok(full_loss_backward(&emb, tau, kind)?.0.total)
    };

    let mut tape = Tape::new();
    let leaves: Vec<Var> = raw.iter().map(|r| tape.param(r.clone())).collect();
    let normed: Vec<Var> = leaves
        .iter()
        .map(|&v| tape.l2_normalize_rows(v, 1e-12))
        .collect::<Result<_>>()?;
    let emb = BatchEmbeddings::new(
        tape.value(normed[0]).clone(),
        tape.value(normed[1]).clone(),
        Some(tape.value(normed[2]).clone()),
    )?;
    let (_, g) = full_loss_backward(&emb, tau, kind)?;
    let seeds = [g.x, g.y, g.z.expect("aux view present")];

    let mut worst = 0.0f64;
    for k in 0..3 {
        let grads = tape.backward_with(normed[k], seeds[k].clone())?;
        let analytic = grads.get(leaves[k]).expect("leaf gradient").clone();
        let numeric = finite_difference_gradient(
            |x| {
                let mut rows = raw.clone();
                rows[k] = x.clone();
                loss_of(&rows).expect("valid rows")
            },
            &raw[k],
            STEP,
        );
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    Ok(CheckResult {
        name: format!("{}_embedding_grads", loss_name(kind)),
        max_error: worst,
        tolerance: EMBEDDING_TOLERANCE,
    })
}

fn encoder_loss(state: &EncoderState<f64>, batch: &Tensor<f64>, n: usize, tau: f64) -> Result<f64> {
    let (_, e) = state.encode(batch)?;
    let part = |p: usize| {
        let d = e.shape()[1];
        Tensor::new([n, d], e.data()[p * n * d..(p + 1) * n * d].to_vec())
    };
    let emb = BatchEmbeddings::new(part(0)?, part(1)?, Some(part(2)?))?;
    Ok(full_loss_backward(&emb, tau, LossKind::GntXent)?.0.total)
}

/// Encoder parameters → three-view embeddings → GNT-Xent, checked end to end.
pub fn encoder_grad_check(architecture: Architecture, seed: u64) -> Result<CheckResult> {
    let cfg = EncoderConfig {
        architecture,
        widths: vec![3, 4],
        embed_dim: 5,
        projection_head: architecture == Architecture::Mlp,
        head_hidden: 6,
        image_size: 6,
    };
    let mut state: EncoderState<f64> = init_encoder(&cfg, seed)?;
    let n = 3;
    let mut rng = seed::rng(seed, &[0xec]);
    // Positive biases keep every relu unit live on the tiny input.
    for (name, p) in cfg.parameter_layout().iter().zip(state.params_mut()) {
        if name.0.ends_with("bias") {
            *p = uniform(p.shape(), 0.1, 0.3, &mut rng);
        }
    }
    let batch = uniform(&[3 * n, 3, 6, 6], -1.0, 1.0, &mut rng);
    let tau = 0.5;

    let mut tape = Tape::new();
    let params = state.bind(&mut tape);
    let input = tape.constant(batch.clone());
    let fwd = state.forward(&mut tape, &params, input)?;
    let e = tape.value(fwd.embedding).clone();
    let d = e.shape()[1];
    let part = |p: usize| Tensor::new([n, d], e.data()[p * n * d..(p + 1) * n * d].to_vec());
    let emb = BatchEmbeddings::new(part(0)?, part(1)?, Some(part(2)?))?;
    let (_, g) = full_loss_backward(&emb, tau, LossKind::GntXent)?;
    let mut seed_data = g.x.into_data();
    seed_data.extend(g.y.into_data());
    seed_data.extend(g.z.expect("aux").into_data());
    let grads = tape.backward_with(fwd.embedding, Tensor::new([3 * n, d], seed_data)?)?;

    let mut worst = 0.0f64;
    for (k, &p) in params.iter().enumerate() {
        let analytic = grads.get(p).expect("parameter gradient").clone();
        let numeric = finite_difference_gradient(
            |w| {
                let mut s = state.clone();
                s.params_mut()[k] = w.clone();
                encoder_loss(&s, &batch, n, tau).expect("valid forward")
            },
            &state.params()[k],
            STEP,
        );
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    let arch = match architecture {
        Architecture::SmallConv => "small_conv",
        Architecture::Mlp => "mlp_head",
    };
    Ok(CheckResult {
        name: format!("encoder_{arch}_end_to_end"),
        max_error: worst,
        tolerance: ENCODER_TOLERANCE,
    })
}

/// The whole suite.
pub fn run_gradcheck(seed: u64) -> Result<GradcheckReport> {
    let mut checks = tensor_op_checks(seed)?;
    for kind in [LossKind::GntXent, LossKind::NtXent] {
        checks.push(similarity_grad_check(kind, true, seed)?);
        checks.push(similarity_grad_check(kind, false, seed)?);
    }
    checks.push(positive_gradient_check(seed)?);
    for kind in [LossKind::GntXent, LossKind::NtXent] {
        checks.push(embedding_grad_check(kind, seed)?);
    }
    checks.push(encoder_grad_check(Architecture::SmallConv, seed)?);
    checks.push(encoder_grad_check(Architecture::Mlp, seed)?);
    Ok(GradcheckReport { checks })
}
