//! Transference measures and per-task gradient modification strategies.
//!
//! All strategies act on the trunk gradients `g_i = ∇_θ L_i` only, one
//! flattened [`ParamVector`] per task. Head gradients are never touched.
//!
//! Transference from task `i` to task `j` is the drop in `L_j` after a
//! virtual step of size `γ_i` along `-g_i`. Its first-order form is
//! `γ_i g_iᵀg_j`, and its gradient w.r.t. θ is `γ_i H_j g_i`. CoGrad ascends
//! that gradient inside each task's own descent direction, replacing the
//! Hessian-vector product with the squared-gradient surrogate
//! `λ g_i ⊙ g_i ⊙ g_j`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{default_hvp_eps, finite_diff_hvp, ParamVector, TensorError};

/// Largest trunk size the exact-HVP variant will run on.
pub const MAX_EXACT_HVP_PARAMS: usize = 10_000;

/// Smoothing factor of the magnitude-balance moving average.
pub const MAGNITUDE_EMA_DECAY: f64 = 0.9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error(transparent)]
    Dimension(#[from] TensorError),
    #[error("degenerate gradient: {0}")]
    Degenerate(String),
    #[error("evaluation failed: {0}")]
    Evaluation(String),
    #[error("exact HVP refused: {params} shared parameters exceed the budget of {limit}")]
    Budget { params: usize, limit: usize },
    #[error("invalid strategy config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, GradError>;

fn check_all_same_len(grads: &[ParamVector]) -> Result<()> {
    if let Some(first) = grads.first() {
        for g in &grads[1..] {
            first.check_same_len(g)?;
        }
    }
    Ok(())
}

/// `L_j(θ) − L_j(θ − γ_i g_i)`. θ itself is left untouched.
pub fn transfer_exact<F>(loss_j: F, theta: &ParamVector, g_i: &ParamVector, gamma_i: f64) -> Result<f64>
where
    F: Fn(&ParamVector) -> f64,
{
    theta.check_same_len(g_i)?;
    if !(gamma_i > 0.0) {
        return Err(GradError::Config(format!("gamma must be positive, got {gamma_i}")));
    }
    let before = loss_j(theta);
    let mut lookahead = theta.clone();
    lookahead.axpy(-gamma_i, g_i);
    let after = loss_j(&lookahead);
    if !before.is_finite() || !after.is_finite() {
        return Err(GradError::Evaluation(format!(
            "non-finite loss (before {before}, after {after})"
        )));
    }
    Ok(before - after)
}

/// First-order transference `γ_i g_iᵀg_j`.
pub fn transfer_first_order(g_i: &ParamVector, g_j: &ParamVector, gamma_i: f64) -> Result<f64> {
    g_i.check_same_len(g_j)?;
    Ok(gamma_i * g_i.dot(g_j))
}

/// Squared-gradient surrogate for a Hessian-vector product:
/// `H_owner · direction ≈ λ · g_owner ⊙ g_owner ⊙ direction`.
pub fn approx_hvp(g_owner: &ParamVector, direction: &ParamVector, lambda: f64) -> Result<ParamVector> {
    g_owner.check_same_len(direction)?;
    let values = g_owner
        .values
        .iter()
        .zip(&direction.values)
        .map(|(g, v)| lambda * g * g * v)
        .collect();
    Ok(direction.with_values(values)?)
}

/// CoGrad: `ĝ_i = g_i − Σ_{j≠i} γ_j λ g_i ⊙ g_i ⊙ g_j`, every output built
/// from the original gradients.
pub fn cograd_modify(grads: &[ParamVector], gammas: &[f64], lambda: f64) -> Result<Vec<ParamVector>> {
    check_all_same_len(grads)?;
    if gammas.len() != grads.len() {
        return Err(TensorError::Dimension {
            expected: grads.len(),
            found: gammas.len(),
        }
        .into());
    }
    let mut out = Vec::with_capacity(grads.len());
    for (i, g_i) in grads.iter().enumerate() {
        let mut modified = g_i.clone();
        for (j, g_j) in grads.iter().enumerate() {
            // zero-strength partners are skipped so the null case is bitwise exact
            if j == i || gammas[j] == 0.0 {
                continue;
            }
            modified.axpy(-gammas[j], &approx_hvp(g_i, g_j, lambda)?);
        }
        out.push(modified);
    }
    Ok(out)
}

/// CoGrad with central-difference Hessian-vector products in place of the
/// surrogate: `ĝ_i = g_i − Σ_{j≠i} γ_j H_i g_j`. `grad_fn(i, θ)` must return
/// task `i`'s trunk gradient at θ.
pub fn cograd_modify_exact_hvp<F>(
    grads: &[ParamVector],
    grad_fn: F,
    theta: &ParamVector,
    gammas: &[f64],
) -> Result<Vec<ParamVector>>
where
    F: Fn(usize, &ParamVector) -> ParamVector,
{
    if theta.len() > MAX_EXACT_HVP_PARAMS {
        return Err(GradError::Budget {
            params: theta.len(),
            limit: MAX_EXACT_HVP_PARAMS,
        });
    }
    check_all_same_len(grads)?;
    if let Some(g) = grads.first() {
        theta.check_same_len(g)?;
    }
    if gammas.len() != grads.len() {
        return Err(TensorError::Dimension {
            expected: grads.len(),
            found: gammas.len(),
        }
        .into());
    }
    let eps = default_hvp_eps(theta);
    let mut out = Vec::with_capacity(grads.len());
    for (i, g_i) in grads.iter().enumerate() {
        let mut modified = g_i.clone();
        for (j, g_j) in grads.iter().enumerate() {
            if j == i || gammas[j] == 0.0 {
                continue;
            }
            let hvp = finite_diff_hvp(|th| grad_fn(i, th), theta, g_j, eps)?;
            modified.axpy(-gammas[j], &hvp);
        }
        out.push(modified);
    }
    Ok(out)
}

/// PCGrad with an explicit partner order per task. Each task is projected
/// against the original gradients of its partners, in the given order,
/// whenever their inner product is negative.
pub fn pcgrad_modify_ordered(grads: &[ParamVector], partner_orders: &[Vec<usize>]) -> Result<Vec<ParamVector>> {
    check_all_same_len(grads)?;
    if partner_orders.len() != grads.len() {
        return Err(TensorError::Dimension {
            expected: grads.len(),
            found: partner_orders.len(),
        }
        .into());
    }
    let mut out = Vec::with_capacity(grads.len());
    for (i, order) in partner_orders.iter().enumerate() {
        let mut g = grads[i].clone();
        for &j in order {
            if j == i {
                continue;
            }
            let partner = grads.get(j).ok_or_else(|| {
                GradError::Config(format!("partner index {j} out of range"))
            })?;
            let inner = g.dot(partner);
            if inner < 0.0 {
                let sq = partner.dot(partner);
                if !(sq > 0.0) {
                    return Err(GradError::Degenerate(format!(
                        "projection of task {i} onto zero-norm gradient of task {j}"
                    )));
                }
                g.axpy(-inner / sq, partner);
            }
        }
        out.push(g);
    }
    Ok(out)
}

/// Partner visiting order for every task, shuffled from `order_seed`.
pub fn pcgrad_orders(num_tasks: usize, order_seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(order_seed);
    (0..num_tasks)
        .map(|i| {
            let mut partners: Vec<usize> = (0..num_tasks).filter(|&j| j != i).collect();
            partners.shuffle(&mut rng);
            partners
        })
        .collect()
}

/// PCGrad with seeded partner order.
pub fn pcgrad_modify(grads: &[ParamVector], order_seed: u64) -> Result<Vec<ParamVector>> {
    pcgrad_modify_ordered(grads, &pcgrad_orders(grads.len(), order_seed))
}

/// Moving-average gradient norms kept by magnitude balancing.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeState {
    pub ema_norms: Vec<f64>,
}

/// Rescales every non-anchor task so its moving-average norm approaches the
/// anchor's (task 0): `g_t ← g_t · (m_0 / m_t)^relax`.
pub fn magnitude_balance(
    grads: &[ParamVector],
    relax: f64,
    state: &mut MagnitudeState,
) -> Result<Vec<ParamVector>> {
    check_all_same_len(grads)?;
    if !(0.0..=1.0).contains(&relax) {
        return Err(GradError::Config(format!("relax {relax} outside [0, 1]")));
    }
    if state.ema_norms.is_empty() {
        state.ema_norms = vec![0.0; grads.len()];
    } else if state.ema_norms.len() != grads.len() {
        return Err(TensorError::Dimension {
            expected: state.ema_norms.len(),
            found: grads.len(),
        }
        .into());
    }
    for (m, g) in state.ema_norms.iter_mut().zip(grads) {
        *m = MAGNITUDE_EMA_DECAY * *m + (1.0 - MAGNITUDE_EMA_DECAY) * g.norm();
    }
    if relax == 0.0 {
        return Ok(grads.to_vec());
    }
    if let Some(t) = state.ema_norms.iter().position(|&m| !(m > 0.0)) {
        return Err(GradError::Degenerate(format!(
            "moving-average norm of task {t} is zero"
        )));
    }
    let anchor = state.ema_norms[0];
    Ok(grads
        .iter()
        .zip(&state.ema_norms)
        .enumerate()
        .map(|(t, (g, &m))| {
            if t == 0 {
                g.clone()
            } else {
                g.scaled((anchor / m).powf(relax))
            }
        })
        .collect())
}

/// `a·b / (‖a‖‖b‖)`, or 0 when either vector is zero.
pub fn cosine(a: &ParamVector, b: &ParamVector) -> f64 {
    let denom = a.norm() * b.norm();
    if denom > 0.0 {
        (a.dot(b) / denom).clamp(-1.0, 1.0)
    } else {
        0.0
    }
}

/// Cosine similarity of every pair of task gradients.
pub fn pairwise_cosine(grads: &[ParamVector]) -> Vec<Vec<f64>> {
    grads
        .iter()
        .map(|a| grads.iter().map(|b| cosine(a, b)).collect())
        .collect()
}

/// Cosine and norm ratio `‖approx‖ / ‖exact‖` between two HVP estimates.
pub fn hvp_agreement(exact: &ParamVector, approx: &ParamVector) -> (f64, f64) {
    let ratio = if exact.norm() > 0.0 {
        approx.norm() / exact.norm()
    } else if approx.norm() == 0.0 {
        1.0
    } else {
        f64::INFINITY
    };
    (cosine(exact, approx), ratio)
}

/// One transference measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferenceRecord {
    pub step: usize,
    pub source_task: usize,
    pub target_task: usize,
    pub exact_delta: f64,
    pub first_order: f64,
    pub gamma_used: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Sum,
    Cograd,
    CogradExactHvp,
    Pcgrad,
    MagnitudeBalance,
}

impl StrategyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::Sum => "sum",
            StrategyKind::Cograd => "cograd",
            StrategyKind::CogradExactHvp => "cograd_exact_hvp",
            StrategyKind::Pcgrad => "pcgrad",
            StrategyKind::MagnitudeBalance => "magnitude_balance",
        }
    }
}

fn default_lambda() -> f64 {
    1.0
}

fn default_relax() -> f64 {
    1.0
}

/// Strategy selection plus its hyper-parameters and private state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    /// Label used for output directories; defaults to the kind name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Per-task transference strength (CoGrad variants).
    #[serde(default)]
    pub gammas: Vec<f64>,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Magnitude-balance exponent.
    #[serde(default = "default_relax")]
    pub relax: f64,
    /// Apply the strategy to each tensor of the trunk separately.
    #[serde(default)]
    pub per_layer: bool,
    #[serde(skip)]
    pub state: Vec<MagnitudeState>,
}

/// What a strategy may look at besides the gradients themselves.
pub struct StepContext<'a> {
    pub step: usize,
    pub order_seed: u64,
    pub theta: &'a ParamVector,
    /// Task trunk gradient at an arbitrary θ; required by the exact-HVP variant.
    pub grad_fn: Option<&'a dyn Fn(usize, &ParamVector) -> ParamVector>,
}

impl StrategyConfig {
    pub fn new(kind: StrategyKind) -> Self {
        Self {
            kind,
            name: None,
            gammas: Vec::new(),
            lambda: 1.0,
            relax: 1.0,
            per_layer: false,
            state: Vec::new(),
        }
    }

    pub fn sum() -> Self {
        Self::new(StrategyKind::Sum)
    }

    pub fn cograd(gammas: Vec<f64>) -> Self {
        Self {
            gammas,
            ..Self::new(StrategyKind::Cograd)
        }
    }

    pub fn cograd_exact_hvp(gammas: Vec<f64>) -> Self {
        Self {
            gammas,
            ..Self::new(StrategyKind::CogradExactHvp)
        }
    }

    pub fn pcgrad() -> Self {
        Self::new(StrategyKind::Pcgrad)
    }

    pub fn magnitude_balance(relax: f64) -> Self {
        Self {
            relax,
            ..Self::new(StrategyKind::MagnitudeBalance)
        }
    }

    pub fn label(&self) -> String {
        self.name
            .clone()
            .unwrap_or_else(|| self.kind.as_str().to_string())
    }

    pub fn validate(&self, num_tasks: usize) -> Result<()> {
        if matches!(self.kind, StrategyKind::Cograd | StrategyKind::CogradExactHvp) {
            if self.gammas.len() != num_tasks {
                return Err(GradError::Config(format!(
                    "{} gammas given for {num_tasks} tasks",
                    self.gammas.len()
                )));
            }
            if self.gammas.iter().any(|g| !(*g >= 0.0) || !g.is_finite()) {
                return Err(GradError::Config("gammas must be finite and non-negative".into()));
            }
        }
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(GradError::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.relax) {
            return Err(GradError::Config(format!("relax {} outside [0, 1]", self.relax)));
        }
        if self.kind == StrategyKind::CogradExactHvp && self.per_layer {
            return Err(GradError::Config("exact-HVP variant has no per-layer mode".into()));
        }
        Ok(())
    }

    /// Clears strategy state (moving averages).
    pub fn reset(&mut self) {
        self.state.clear();
    }

    /// Returns the modified trunk gradients for one step.
    pub fn apply(&mut self, grads: &[ParamVector], ctx: &StepContext<'_>) -> Result<Vec<ParamVector>> {
        self.validate(grads.len())?;
        check_all_same_len(grads)?;
        if !self.per_layer || grads.is_empty() || self.kind == StrategyKind::CogradExactHvp {
            if self.state.is_empty() {
                self.state.push(MagnitudeState::default());
            }
            let mut state = std::mem::take(&mut self.state[0]);
            let out = self.apply_segment(grads, ctx, &mut state);
            self.state[0] = state;
            return out;
        }
        let layout = grads[0].layout.clone();
        if self.state.len() != layout.len() {
            self.state = vec![MagnitudeState::default(); layout.len()];
        }
        let mut out: Vec<Vec<f64>> = vec![Vec::with_capacity(grads[0].len()); grads.len()];
        for (k, spec) in layout.iter().enumerate() {
            let range = spec.offset..spec.offset + spec.numel();
            let segment: Vec<ParamVector> = grads
                .iter()
                .map(|g| ParamVector::from_values(g.values[range.clone()].to_vec()))
                .collect();
            let mut state = std::mem::take(&mut self.state[k]);
            let seg_ctx = StepContext {
                order_seed: ctx.order_seed.wrapping_add(k as u64),
                ..*ctx
            };
            let modified = self.apply_segment(&segment, &seg_ctx, &mut state);
            self.state[k] = state;
            for (dst, m) in out.iter_mut().zip(modified?) {
                dst.extend(m.values);
            }
        }
        out.into_iter()
            .zip(grads)
            .map(|(v, g)| Ok(g.with_values(v)?))
            .collect()
    }

    fn apply_segment(
        &self,
        grads: &[ParamVector],
        ctx: &StepContext<'_>,
        state: &mut MagnitudeState,
    ) -> Result<Vec<ParamVector>> {
        match self.kind {
            StrategyKind::Sum => Ok(grads.to_vec()),
            StrategyKind::Cograd => cograd_modify(grads, &self.gammas, self.lambda),
            StrategyKind::CogradExactHvp => {
                let grad_fn = ctx.grad_fn.ok_or_else(|| {
                    GradError::Config("exact-HVP variant needs a gradient evaluator".into())
                })?;
                cograd_modify_exact_hvp(grads, grad_fn, ctx.theta, &self.gammas)
            }
            StrategyKind::Pcgrad => pcgrad_modify(grads, ctx.order_seed),
            StrategyKind::MagnitudeBalance => magnitude_balance(grads, self.relax, state),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_gradient;
    use proptest::prelude::*;
    use rand::Rng;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::from_values(v.to_vec())
    }

    fn half_norm(t: &ParamVector) -> f64 {
        0.5 * t.dot(t)
    }

    #[test]
    fn transfer_exact_on_quadratic() {
        let d = transfer_exact(half_norm, &pv(&[1.0, 1.0]), &pv(&[1.0, 0.0]), 0.1).unwrap();
        assert!((d - 0.095).abs() < 1e-12);
    }

    #[test]
    fn transfer_exact_null_cases() {
        let theta = pv(&[0.3, -2.0]);
        assert_eq!(transfer_exact(half_norm, &theta, &pv(&[0.0, 0.0]), 0.5).unwrap(), 0.0);
        assert_eq!(transfer_exact(|_| 4.0, &theta, &pv(&[1.0, 2.0]), 0.5).unwrap(), 0.0);
        assert!(transfer_exact(half_norm, &theta, &pv(&[1.0]), 0.5).is_err());
        assert!(transfer_exact(|_| f64::NAN, &theta, &pv(&[1.0, 0.0]), 0.5).is_err());
        assert!(transfer_exact(half_norm, &theta, &pv(&[1.0, 0.0]), 0.0).is_err());
    }

    #[test]
    fn transfer_first_order_values() {
        assert_eq!(transfer_first_order(&pv(&[1.0, 0.0]), &pv(&[0.0, 1.0]), 0.7).unwrap(), 0.0);
        let v = transfer_first_order(&pv(&[1.0, 2.0]), &pv(&[3.0, 1.0]), 0.1).unwrap();
        assert!((v - 0.5).abs() < 1e-15);
        // quadratic remainder: first-order minus exact equals γ²‖g_i‖²/2
        let fo = transfer_first_order(&pv(&[1.0, 0.0]), &pv(&[1.0, 1.0]), 0.1).unwrap();
        assert_eq!(fo, 0.1);
        let ex = transfer_exact(half_norm, &pv(&[1.0, 1.0]), &pv(&[1.0, 0.0]), 0.1).unwrap();
        assert!((fo - ex - 0.005).abs() < 1e-12);
        assert!(transfer_first_order(&pv(&[1.0]), &pv(&[1.0, 2.0]), 0.1).is_err());
    }

    proptest! {
        #[test]
        fn self_transference_is_non_negative(g in prop::collection::vec(-10.0f64..10.0, 1..8), gamma in 1e-6f64..1.0) {
            let g = pv(&g);
            prop_assert!(transfer_first_order(&g, &g, gamma).unwrap() >= 0.0);
        }
    }

    fn logistic_loss(w: &[f64], rows: &[(Vec<f64>, f64)]) -> f64 {
        rows.iter()
            .map(|(x, y)| {
                let z: f64 = x.iter().zip(w).map(|(a, b)| a * b).sum();
                z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
            })
            .sum::<f64>()
            / rows.len() as f64
    }

    #[test]
    fn first_order_gap_shrinks_quadratically_on_logistic_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut ratios = Vec::new();
        for _ in 0..10 {
            let rows: Vec<(Vec<f64>, f64)> = (0..32)
                .map(|_| {
                    let x: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
                    (x, f64::from(rng.random_bool(0.5) as u8))
                })
                .collect();
            let theta = pv(&(0..4).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>());
            let g_i = pv(&(0..4).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>());
            let loss = |t: &ParamVector| logistic_loss(&t.values, &rows);
            let g_j = finite_diff_gradient(loss, &theta, 1e-5).unwrap();
            let gap = |gamma: f64| {
                (transfer_exact(loss, &theta, &g_i, gamma).unwrap()
                    - transfer_first_order(&g_i, &g_j, gamma).unwrap())
                .abs()
            };
            ratios.push(gap(0.1) / gap(0.05));
        }
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        assert!(mean >= 3.5, "mean gap ratio {mean}");
    }

    #[test]
    fn transference_gradient_matches_hvp_on_quadratic() {
        // L_j = ½θᵀAθ with symmetric A; ∇_θ Δ(θ) with g_i held fixed is γ A g_i
        let a = [[2.0, 0.5, 0.0], [0.5, 1.0, -0.3], [0.0, -0.3, 3.0]];
        let loss_j = move |t: &ParamVector| {
            let mut s = 0.0;
            for r in 0..3 {
                for c in 0..3 {
                    s += 0.5 * t.values[r] * a[r][c] * t.values[c];
                }
            }
            s
        };
        let grad_j = move |t: &ParamVector| {
            pv(&(0..3)
                .map(|r| (0..3).map(|c| a[r][c] * t.values[c]).sum())
                .collect::<Vec<f64>>())
        };
        let theta = pv(&[0.4, -1.0, 0.7]);
        let g_i = pv(&[1.0, 0.5, -2.0]);
        let gamma = 0.05;
        let fd = finite_diff_gradient(
            |t| transfer_exact(loss_j, t, &g_i, gamma).unwrap(),
            &theta,
            1e-3,
        )
        .unwrap();
        let hvp = finite_diff_hvp(grad_j, &theta, &g_i, default_hvp_eps(&theta))
            .unwrap()
            .scaled(gamma);
        assert!(fd.sub(&hvp).norm() <= 1e-3 * hvp.norm());
    }

    #[test]
    fn approx_hvp_values() {
        let out = approx_hvp(&pv(&[1.0, 2.0]), &pv(&[3.0, -1.0]), 1.0).unwrap();
        assert_eq!(out.values, vec![3.0, -4.0]);
        let zero = approx_hvp(&pv(&[1.0, 2.0]), &pv(&[0.0, 0.0]), 1.0).unwrap();
        assert_eq!(zero.values, vec![0.0, 0.0]);
        assert!(approx_hvp(&pv(&[1.0]), &pv(&[0.0, 0.0]), 1.0).is_err());
    }

    #[test]
    fn approx_hvp_is_exact_on_constructed_diag_quadratic() {
        // θ_k = 1/√h_k makes g = √h, hence g⊙g = diag(H)
        let h = [0.5, 2.0, 4.0, 9.0];
        let theta = pv(&h.iter().map(|v: &f64| 1.0 / v.sqrt()).collect::<Vec<_>>());
        let grad = |t: &ParamVector| pv(&t.values.iter().zip(&h).map(|(x, h)| x * h).collect::<Vec<_>>());
        let g = grad(&theta);
        for dir in [[1.0, -2.0, 0.5, 3.0], [0.0, 1.0, 1.0, -1.0]] {
            let v = pv(&dir);
            let exact = finite_diff_hvp(grad, &theta, &v, default_hvp_eps(&theta)).unwrap();
            let approx = approx_hvp(&g, &v, 1.0).unwrap();
            assert!(exact.sub(&approx).norm_inf() < 1e-9);
            let (cos, ratio) = hvp_agreement(&exact, &approx);
            assert!((cos - 1.0).abs() < 1e-6);
            assert!((ratio - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cograd_hand_example() {
        let grads = vec![pv(&[1.0, 2.0]), pv(&[1.0, 1.0])];
        let out = cograd_modify(&grads, &[0.1, 0.1], 1.0).unwrap();
        assert!((out[0].values[0] - 0.9).abs() < 1e-15);
        assert!((out[0].values[1] - 1.6).abs() < 1e-15);
        // ĝ₂ = g₂ − γ₁ g₂⊙g₂⊙g₁ = [1,1] − 0.1·[1,2]
        assert!((out[1].values[0] - 0.9).abs() < 1e-15);
        assert!((out[1].values[1] - 0.8).abs() < 1e-15);
        assert_eq!(grads[0].values, vec![1.0, 2.0]);
    }

    #[test]
    fn cograd_null_cases_are_bitwise() {
        let grads = vec![pv(&[1.5, -0.0, 3.0]), pv(&[-2.0, 0.5, -0.0]), pv(&[0.1, 0.2, 0.3])];
        assert_eq!(cograd_modify(&grads, &[0.0; 3], 1.0).unwrap(), grads);
        let single = vec![pv(&[1.0, -2.0])];
        assert_eq!(cograd_modify(&single, &[0.7], 1.0).unwrap(), single);
        assert!(cograd_modify(&grads, &[0.1; 2], 1.0).is_err());
        assert!(cograd_modify(&[pv(&[1.0]), pv(&[1.0, 2.0])], &[0.1; 2], 1.0).is_err());
    }

    #[test]
    fn exact_hvp_variant_with_identity_hessian() {
        let grads = vec![pv(&[1.0, 2.0]), pv(&[-1.0, 0.5]), pv(&[0.3, 0.3])];
        let gammas = [0.1, 0.2, 0.05];
        let theta = pv(&[0.2, -0.4]);
        let out = cograd_modify_exact_hvp(&grads, |_, t: &ParamVector| t.clone(), &theta, &gammas).unwrap();
        for i in 0..3 {
            let mut expect = grads[i].clone();
            for j in (0..3).filter(|&j| j != i) {
                expect.axpy(-gammas[j], &grads[j]);
            }
            assert!(out[i].sub(&expect).norm_inf() < 1e-9);
        }
        let same = cograd_modify_exact_hvp(&grads, |_, t: &ParamVector| t.clone(), &theta, &[0.0; 3]).unwrap();
        assert_eq!(same, grads);
    }

    #[test]
    fn exact_hvp_matches_surrogate_on_constructed_case() {
        // both tasks share L = ½θᵀdiag(h)θ at θ_k = 1/√h_k
        let h = [0.25, 1.0, 16.0];
        let theta = pv(&h.iter().map(|v: &f64| 1.0 / v.sqrt()).collect::<Vec<_>>());
        let grad = |_: usize, t: &ParamVector| pv(&t.values.iter().zip(&h).map(|(x, h)| x * h).collect::<Vec<_>>());
        let g = grad(0, &theta);
        let grads = vec![g.clone(), g];
        let gammas = [0.01, 0.02];
        let exact = cograd_modify_exact_hvp(&grads, grad, &theta, &gammas).unwrap();
        let approx = cograd_modify(&grads, &gammas, 1.0).unwrap();
        for (a, b) in exact.iter().zip(&approx) {
            assert!(a.sub(b).norm_inf() < 1e-6);
        }
    }

    #[test]
    fn exact_hvp_refuses_large_trunks() {
        let big = ParamVector::from_values(vec![0.0; MAX_EXACT_HVP_PARAMS + 1]);
        let err = cograd_modify_exact_hvp(&[big.clone()], |_, t: &ParamVector| t.clone(), &big, &[0.1]).unwrap_err();
        assert!(matches!(err, GradError::Budget { .. }));
        assert!(err.to_string().contains("10000"));
    }

    #[test]
    fn pcgrad_examples() {
        let out = pcgrad_modify(&[pv(&[1.0, 0.0]), pv(&[-1.0, 1.0])], 0).unwrap();
        assert!(out[0].sub(&pv(&[0.5, 0.5])).norm_inf() < 1e-15);
        assert!(out[1].sub(&pv(&[0.0, 1.0])).norm_inf() < 1e-15);
        let agree = vec![pv(&[1.0, 0.0]), pv(&[1.0, 1.0])];
        assert_eq!(pcgrad_modify(&agree, 3).unwrap(), agree);
        let opp = pcgrad_modify(&[pv(&[2.0, -1.0]), pv(&[-2.0, 1.0])], 1).unwrap();
        assert!(opp[0].norm() < 1e-15);
    }

    proptest! {
        #[test]
        fn pcgrad_removes_every_conflict(
            a in prop::collection::vec(-5.0f64..5.0, 6),
            b in prop::collection::vec(-5.0f64..5.0, 6),
            seed: u64,
        ) {
            let (ga, gb) = (pv(&a), pv(&b));
            prop_assume!(gb.norm() > 1e-6 && ga.norm() > 1e-6);
            let out = pcgrad_modify(&[ga.clone(), gb.clone()], seed).unwrap();
            if ga.dot(&gb) < 0.0 {
                prop_assert!(out[0].dot(&gb) >= -1e-12);
                prop_assert!(out[1].dot(&ga) >= -1e-12);
            } else {
                prop_assert_eq!(&out[0], &ga);
            }
        }
    }

    #[test]
    fn pcgrad_orders_are_seeded_permutations() {
        let a = pcgrad_orders(4, 9);
        assert_eq!(a, pcgrad_orders(4, 9));
        for (i, order) in a.iter().enumerate() {
            let mut sorted = order.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..4).filter(|&j| j != i).collect::<Vec<_>>());
        }
    }

    #[test]
    fn magnitude_balance_examples() {
        let grads = vec![pv(&[6.0, 8.0]), pv(&[0.6, 0.8])];
        let mut state = MagnitudeState::default();
        assert_eq!(magnitude_balance(&grads, 0.0, &mut state).unwrap(), grads);
        let mut state = MagnitudeState::default();
        let out = magnitude_balance(&grads, 1.0, &mut state).unwrap();
        assert!(out[1].sub(&pv(&[6.0, 8.0])).norm_inf() < 1e-12);
        assert!((cosine(&grads[1], &out[1]) - 1.0).abs() < 1e-15);
        assert!((state.ema_norms[0] - 1.0).abs() < 1e-15);
        assert!((state.ema_norms[1] - 0.1).abs() < 1e-15);
        let mut state = MagnitudeState::default();
        let err = magnitude_balance(&[pv(&[1.0]), pv(&[0.0])], 1.0, &mut state).unwrap_err();
        assert!(matches!(err, GradError::Degenerate(_)));
        assert!(magnitude_balance(&grads, 1.5, &mut MagnitudeState::default()).is_err());
    }

    #[test]
    fn magnitude_balance_converges_to_anchor_norm() {
        let grads = vec![pv(&[3.0, 4.0]), pv(&[0.03, -0.04])];
        let mut state = MagnitudeState::default();
        let mut last = Vec::new();
        for _ in 0..5 {
            last = magnitude_balance(&grads, 1.0, &mut state).unwrap();
        }
        assert!((last[1].norm() - last[0].norm()).abs() < 1e-9);
    }

    #[test]
    fn pairwise_cosine_cases() {
        let c = pairwise_cosine(&[pv(&[1.0, 0.0]), pv(&[0.0, 1.0])]);
        assert_eq!(c, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let c = pairwise_cosine(&[pv(&[1.0, 2.0]), pv(&[3.0, 6.0])]);
        assert!((c[0][1] - 1.0).abs() < 1e-15);
        let c = pairwise_cosine(&[pv(&[1.0, 2.0]), pv(&[-1.0, -2.0])]);
        assert!((c[0][1] + 1.0).abs() < 1e-15);
        let c = pairwise_cosine(&[pv(&[0.0, 0.0]), pv(&[1.0, 0.0])]);
        assert_eq!(c[0], vec![0.0, 0.0]);
    }

    fn random_grads(rng: &mut ChaCha8Rng, t: usize, n: usize) -> Vec<ParamVector> {
        (0..t)
            .map(|_| pv(&(0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()))
            .collect()
    }

    #[test]
    fn strategies_are_permutation_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let grads = random_grads(&mut rng, 3, 7);
        // swap tasks 1 and 2 (task 0 stays the magnitude-balance anchor)
        let perm = [0usize, 2, 1];
        let permuted: Vec<ParamVector> = perm.iter().map(|&p| grads[p].clone()).collect();
        let theta = grads[0].zeros_like();
        let ctx = StepContext { step: 0, order_seed: 0, theta: &theta, grad_fn: None };

        let gammas = [0.3, 0.2, 0.1];
        let pg: Vec<f64> = perm.iter().map(|&p| gammas[p]).collect();
        let a = cograd_modify(&grads, &gammas, 1.0).unwrap();
        let b = cograd_modify(&permuted, &pg, 1.0).unwrap();
        for (k, &p) in perm.iter().enumerate() {
            assert!(b[k].sub(&a[p]).norm_inf() < 1e-15);
        }

        for mut cfg in [StrategyConfig::sum(), StrategyConfig::magnitude_balance(0.5)] {
            let a = cfg.clone().apply(&grads, &ctx).unwrap();
            let b = cfg.apply(&permuted, &ctx).unwrap();
            for (k, &p) in perm.iter().enumerate() {
                assert!(b[k].sub(&a[p]).norm_inf() < 1e-15);
            }
        }

        // pcgrad under a fixed explicit order, relabelled accordingly
        let orders = vec![vec![1, 2], vec![2, 0], vec![0, 1]];
        let a = pcgrad_modify_ordered(&grads, &orders).unwrap();
        let inv = [0usize, 2, 1];
        let porders: Vec<Vec<usize>> = perm
            .iter()
            .map(|&p| orders[p].iter().map(|&j| inv[j]).collect())
            .collect();
        let b = pcgrad_modify_ordered(&permuted, &porders).unwrap();
        for (k, &p) in perm.iter().enumerate() {
            assert!(b[k].sub(&a[p]).norm_inf() < 1e-15);
        }
    }

    #[test]
    fn per_layer_cograd_equals_flat_cograd() {
        use crate::tensor::{flatten_params, NamedTensor};
        let mk = |v: [f64; 5]| {
            flatten_params(vec![
                ("a".to_string(), NamedTensor::vector(v[..2].to_vec())),
                ("b".to_string(), NamedTensor::vector(v[2..].to_vec())),
            ])
            .unwrap()
        };
        let grads = vec![mk([1.0, 2.0, -1.0, 0.5, 3.0]), mk([0.5, -1.0, 2.0, 1.0, 1.0])];
        let theta = grads[0].zeros_like();
        let ctx = StepContext { step: 0, order_seed: 0, theta: &theta, grad_fn: None };
        let mut flat = StrategyConfig::cograd(vec![0.1, 0.2]);
        let mut layered = StrategyConfig { per_layer: true, ..flat.clone() };
        assert_eq!(flat.apply(&grads, &ctx).unwrap(), layered.apply(&grads, &ctx).unwrap());

        let mut pc = StrategyConfig { per_layer: true, ..StrategyConfig::pcgrad() };
        let out = pc.apply(&grads, &ctx).unwrap();
        assert_eq!(out[0].layout, grads[0].layout);
        // per-segment projection: each tensor is conflict-free on its own
        for spec in &grads[0].layout {
            let r = spec.offset..spec.offset + spec.numel();
            let dot = |a: &ParamVector, b: &ParamVector| -> f64 {
                a.values[r.clone()].iter().zip(&b.values[r.clone()]).map(|(x, y)| x * y).sum()
            };
            if dot(&grads[0], &grads[1]) < 0.0 {
                assert!(dot(&out[0], &grads[1]) >= -1e-12);
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(StrategyConfig::cograd(vec![0.1]).validate(2).is_err());
        assert!(StrategyConfig::cograd(vec![0.1, -0.1]).validate(2).is_err());
        assert!(StrategyConfig { lambda: 0.0, ..StrategyConfig::cograd(vec![0.1, 0.1]) }
            .validate(2)
            .is_err());
        assert!(StrategyConfig::magnitude_balance(1.5).validate(2).is_err());
        assert!(StrategyConfig::sum().validate(3).is_ok());
        let json = r#"{"kind":"cograd","gammas":[0.01,0.005]}"#;
        let cfg: StrategyConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg, StrategyConfig::cograd(vec![0.01, 0.005]));
        assert_eq!(cfg.label(), "cograd");
        let cfg: StrategyConfig =
            serde_json::from_str(r#"{"kind":"magnitude_balance","relax":0.5,"name":"mb"}"#).unwrap();
        assert_eq!(cfg.label(), "mb");
        assert!(serde_json::from_str::<StrategyConfig>(r#"{"kind":"cograd","gama":[1]}"#).is_err());
    }
}
