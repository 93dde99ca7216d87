//! Penalty-parameter strategies: fixed, residual balancing, restarted
//! Nesterov acceleration and the spectral adaptive scheme.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::consensus::{AgentVars, ConsensusState, Family, ResidualReport};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PenaltyScheme {
    Fixed,
    /// Residual balancing with the printed direction (halve when primal dominates).
    Rb,
    /// Residual balancing in the conventional direction.
    RbInverted,
    Na,
    Ap,
}

impl PenaltyScheme {
    pub const ALL: [PenaltyScheme; 5] = [
        PenaltyScheme::Fixed,
        PenaltyScheme::Rb,
        PenaltyScheme::RbInverted,
        PenaltyScheme::Na,
        PenaltyScheme::Ap,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            PenaltyScheme::Fixed => "fixed",
            PenaltyScheme::Rb => "rb",
            PenaltyScheme::RbInverted => "rb-inverted",
            PenaltyScheme::Na => "na",
            PenaltyScheme::Ap => "ap",
        }
    }
}

impl fmt::Display for PenaltyScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PenaltyScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown penalty scheme {s:?} (expected fixed, rb, rb-inverted, na or ap)"
            ))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApParams {
    pub eps_cor: f64,
    pub c_cg: f64,
    pub freq: usize,
}

impl Default for ApParams {
    fn default() -> Self {
        Self {
            eps_cor: 0.5,
            c_cg: 500.0,
            freq: 10,
        }
    }
}

impl ApParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_cor > 0.0 && self.eps_cor < 1.0) || !(self.c_cg > 0.0) || self.freq == 0 {
            return Err(Error::InvalidParams(format!("{self:?}")));
        }
        Ok(())
    }

    pub fn is_update_round(&self, n: usize) -> bool {
        n % self.freq == 1 % self.freq
    }

    /// `1 + C_cg / n^2`.
    pub fn clamp_factor(&self, n: usize) -> f64 {
        1.0 + self.c_cg / (n as f64).powi(2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RbParams {
    pub ratio: f64,
    pub factor: f64,
    pub freq: usize,
}

impl Default for RbParams {
    fn default() -> Self {
        Self {
            ratio: 10.0,
            factor: 2.0,
            freq: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NaParams {
    pub alpha1: f64,
    pub eta: f64,
}

impl Default for NaParams {
    fn default() -> Self {
        Self { alpha1: 1.0, eta: 0.9 }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// `dual + pen * (primal - copy)`, evaluated before the copy is refreshed.
///
/// For the U, X and T families call this after step 1; for the stacked
/// families after step 2 and before step 3.
pub fn intermediate_duals(a: &AgentVars, f: Family) -> Vec<f64> {
    let (primal, copy, dual) = a.family_vectors(f);
    let pen = a.pen.get(f);
    dual.iter()
        .zip(primal.iter().zip(&copy))
        .map(|(l, (x, c))| l + pen * (x - c))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralEstimate {
    pub sd: f64,
    pub mg: f64,
    pub hybrid: f64,
    pub valid: bool,
}

/// Steepest-descent and minimum-gradient estimates plus their hybrid.
pub fn spectral_alpha(delta_primal: &[f64], delta_dual_hat: &[f64]) -> SpectralEstimate {
    let inner = dot(delta_primal, delta_dual_hat);
    let sd = dot(delta_dual_hat, delta_dual_hat) / inner;
    let mg = inner / dot(delta_primal, delta_primal);
    let hybrid = if 2.0 * mg > sd { mg } else { sd - mg / 2.0 };
    SpectralEstimate {
        sd,
        mg,
        hybrid,
        valid: inner > 0.0 && hybrid.is_finite() && hybrid > 0.0,
    }
}

/// Cosine of the angle between two vectors; 0 if either is zero.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

/// Iterates of one agent and family at an update round.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralSnapshot {
    pub n: usize,
    pub primal: Vec<f64>,
    pub copy: Vec<f64>,
    pub dual: Vec<f64>,
    pub dual_hat: Vec<f64>,
}

/// Last snapshot per agent and family.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SpectralHistory {
    pub slots: Vec<[Option<SpectralSnapshot>; 5]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApCase {
    Both,
    AlphaOnly,
    BetaOnly,
    Unchanged,
    /// First round: snapshot stored, no estimate yet.
    Initial,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApOutcome {
    pub penalty: f64,
    /// Four-case proposal before clamping.
    pub proposed: f64,
    pub alpha: Option<SpectralEstimate>,
    pub beta: Option<SpectralEstimate>,
    pub cor_alpha: f64,
    pub cor_beta: f64,
    pub case: ApCase,
}

/// One adaptive update of one penalty. Replaces the stored snapshot with `current`.
pub fn ap_update(
    slot: &mut Option<SpectralSnapshot>,
    current: SpectralSnapshot,
    penalty: f64,
    params: &ApParams,
) -> ApOutcome {
    let n = current.n;
    let Some(prev) = slot.replace(current) else {
        return ApOutcome {
            penalty,
            proposed: penalty,
            alpha: None,
            beta: None,
            cor_alpha: 0.0,
            cor_beta: 0.0,
            case: ApCase::Initial,
        };
    };
    let cur = slot.as_ref().expect("just stored");
    let dx = sub(&cur.primal, &prev.primal);
    let dl_hat = sub(&cur.dual_hat, &prev.dual_hat);
    let dx_tilde = sub(&prev.copy, &cur.copy);
    let dl = sub(&cur.dual, &prev.dual);

    let alpha = spectral_alpha(&dx, &dl_hat);
    let beta = spectral_alpha(&dx_tilde, &dl);
    let cor_alpha = correlation(&dx, &dl_hat);
    let cor_beta = correlation(&dx_tilde, &dl);
    let ok_a = alpha.valid && cor_alpha > params.eps_cor;
    let ok_b = beta.valid && cor_beta > params.eps_cor;
    let (proposed, case) = match (ok_a, ok_b) {
        (true, true) => ((alpha.hybrid * beta.hybrid).sqrt(), ApCase::Both),
        (true, false) => (alpha.hybrid, ApCase::AlphaOnly),
        (false, true) => (beta.hybrid, ApCase::BetaOnly),
        (false, false) => (penalty, ApCase::Unchanged),
    };
    let k = params.clamp_factor(n);
    ApOutcome {
        penalty: proposed.clamp(penalty / k, penalty * k),
        proposed,
        alpha: Some(alpha),
        beta: Some(beta),
        cor_alpha,
        cor_beta,
        case,
    }
}

/// Residual balancing as printed: halve when the primal residual dominates.
pub fn rb_update(primal: f64, dual: f64, penalty: f64, params: &RbParams, inverted: bool) -> f64 {
    let (shrink, grow) = if inverted {
        (params.factor, 1.0 / params.factor)
    } else {
        (1.0 / params.factor, params.factor)
    };
    if primal >= params.ratio * dual {
        penalty * shrink
    } else if dual >= params.ratio * primal {
        penalty * grow
    } else {
        penalty
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NaStep {
    /// Extrapolation weight `(alpha_k - 1) / alpha_{k+1}`; 0 on restart.
    pub weight: f64,
    pub restart: bool,
}

/// Momentum sequence with restart on a combined-residual increase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NaMomentum {
    pub alpha: f64,
    pub c_prev: f64,
    pub params: NaParams,
}

impl NaMomentum {
    pub fn new(params: NaParams) -> Self {
        Self {
            alpha: params.alpha1,
            c_prev: f64::INFINITY,
            params,
        }
    }

    pub fn step(&mut self, c: f64) -> NaStep {
        if c < self.params.eta * self.c_prev {
            let next = (1.0 + (1.0 + 4.0 * self.alpha * self.alpha).sqrt()) / 2.0;
            let weight = (self.alpha - 1.0) / next;
            self.alpha = next;
            self.c_prev = c;
            NaStep { weight, restart: false }
        } else {
            self.alpha = self.params.alpha1;
            self.c_prev /= self.params.eta;
            NaStep {
                weight: 0.0,
                restart: true,
            }
        }
    }
}

/// `sum over families of (1/pen)|dual - dual_hat|^2 + pen |copy - copy_hat|^2`.
pub fn combined_residual(state: &ConsensusState, hat: &ConsensusState) -> f64 {
    let mut c = 0.0;
    for (a, h) in state.agents.iter().zip(&hat.agents) {
        for f in Family::ALL {
            let (_, copy, dual) = a.family_vectors(f);
            let (_, copy_h, dual_h) = h.family_vectors(f);
            let pen = a.pen.get(f);
            let dd: f64 = dual.iter().zip(&dual_h).map(|(x, y)| (x - y).powi(2)).sum();
            let dc: f64 = copy.iter().zip(&copy_h).map(|(x, y)| (x - y).powi(2)).sum();
            c += dd / pen + pen * dc;
        }
    }
    c
}

/// `dst = cur + w (cur - prev)` over copies, globals and duals.
fn extrapolate(dst: &mut AgentVars, cur: &AgentVars, prev: &AgentVars, w: f64) {
    fn lin<T>(c: T, p: T, w: f64) -> T
    where
        T: std::ops::Sub<Output = T> + std::ops::Mul<f64, Output = T> + std::ops::Add<Output = T> + Copy,
    {
        c + (c - p) * w
    }
    fn vecs<T>(d: &mut [T], c: &[T], p: &[T], w: f64)
    where
        T: std::ops::Sub<Output = T> + std::ops::Mul<f64, Output = T> + std::ops::Add<Output = T> + Copy,
    {
        for ((d, &c), &p) in d.iter_mut().zip(c).zip(p) {
            *d = lin(c, p, w);
        }
    }
    for b in 0..dst.x_stack.len() {
        vecs(&mut dst.x_stack[b], &cur.x_stack[b], &prev.x_stack[b], w);
        vecs(&mut dst.z_stack[b], &cur.z_stack[b], &prev.z_stack[b], w);
        vecs(&mut dst.y[b], &cur.y[b], &prev.y[b], w);
    }
    vecs(&mut dst.u_tilde, &cur.u_tilde, &prev.u_tilde, w);
    vecs(&mut dst.t_stack, &cur.t_stack, &prev.t_stack, w);
    vecs(&mut dst.z, &cur.z, &prev.z, w);
    vecs(&mut dst.s_stack, &cur.s_stack, &prev.s_stack, w);
    vecs(&mut dst.zeta, &cur.zeta, &prev.zeta, w);
    vecs(&mut dst.lambda, &cur.lambda, &prev.lambda, w);
    vecs(&mut dst.eta, &cur.eta, &prev.eta, w);
    dst.s = lin(cur.s, prev.s, w);
    dst.nu = lin(cur.nu, prev.nu, w);
}

/// Restores copies, globals and duals from `src`, leaving locals and penalties.
fn restore(dst: &mut AgentVars, src: &AgentVars) {
    extrapolate(dst, src, src, 0.0);
}

/// One recorded penalty change (or AP evaluation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyUpdate {
    pub iteration: usize,
    pub agent: usize,
    pub family: Family,
    pub old: f64,
    pub new: f64,
    pub rule: String,
}

/// Mutable scheme state across iterations.
#[derive(Debug, Clone)]
pub struct SchemeState {
    scheme: PenaltyScheme,
    pub ap: ApParams,
    pub rb: RbParams,
    history: SpectralHistory,
    hats: Vec<[Option<Vec<f64>>; 5]>,
    na: NaMomentum,
    na_hat: Option<ConsensusState>,
    na_prev: Option<ConsensusState>,
    updates: Vec<PenaltyUpdate>,
}

fn family_index(f: Family) -> usize {
    Family::ALL.iter().position(|&g| g == f).expect("listed")
}

impl SchemeState {
    pub fn new(scheme: PenaltyScheme, initial: &ConsensusState) -> Self {
        let m = initial.agents.len();
        Self {
            scheme,
            ap: ApParams::default(),
            rb: RbParams::default(),
            history: SpectralHistory {
                slots: vec![Default::default(); m],
            },
            hats: vec![Default::default(); m],
            na: NaMomentum::new(NaParams::default()),
            na_hat: None,
            na_prev: (scheme == PenaltyScheme::Na).then(|| initial.clone()),
            updates: Vec::new(),
        }
    }

    pub fn scheme(&self) -> PenaltyScheme {
        self.scheme
    }

    pub fn begin_iteration(&mut self, state: &ConsensusState) {
        if self.scheme == PenaltyScheme::Na {
            self.na_hat = Some(state.clone());
        }
    }

    fn record_hats(&mut self, state: &ConsensusState, families: &[Family]) {
        for (i, a) in state.agents.iter().enumerate() {
            for &f in families {
                self.hats[i][family_index(f)] = Some(intermediate_duals(a, f));
            }
        }
    }

    pub fn after_step1(&mut self, state: &ConsensusState, n: usize) {
        if self.scheme == PenaltyScheme::Ap && self.ap.is_update_round(n) {
            self.record_hats(state, &[Family::U, Family::X, Family::T]);
        }
    }

    pub fn after_step2(&mut self, state: &ConsensusState, n: usize) {
        if self.scheme == PenaltyScheme::Ap && self.ap.is_update_round(n) {
            self.record_hats(state, &[Family::XStack, Family::TStack]);
        }
    }

    /// Applies the scheme after iteration `n`. Returns true on an NA restart.
    pub fn end_iteration(&mut self, state: &mut ConsensusState, report: &ResidualReport, n: usize) -> bool {
        match self.scheme {
            PenaltyScheme::Fixed => false,
            PenaltyScheme::Rb | PenaltyScheme::RbInverted => {
                if n % self.rb.freq == 1 % self.rb.freq {
                    self.apply_rb(state, report, n);
                }
                false
            }
            PenaltyScheme::Ap => {
                if self.ap.is_update_round(n) {
                    self.apply_ap(state, n);
                }
                false
            }
            PenaltyScheme::Na => self.apply_na(state),
        }
    }

    fn apply_rb(&mut self, state: &mut ConsensusState, report: &ResidualReport, n: usize) {
        let inverted = self.scheme == PenaltyScheme::RbInverted;
        for r in &report.families {
            for (i, a) in state.agents.iter_mut().enumerate() {
                let old = a.pen.get(r.family);
                let new = rb_update(r.primal, r.dual, old, &self.rb, inverted);
                if new != old {
                    a.pen.set(r.family, new);
                    self.updates.push(PenaltyUpdate {
                        iteration: n,
                        agent: i,
                        family: r.family,
                        old,
                        new,
                        rule: self.scheme.name().into(),
                    });
                }
            }
        }
    }

    fn apply_ap(&mut self, state: &mut ConsensusState, n: usize) {
        for (i, a) in state.agents.iter_mut().enumerate() {
            for f in Family::ALL {
                let fi = family_index(f);
                let Some(dual_hat) = self.hats[i][fi].take() else {
                    continue;
                };
                let (primal, copy, dual) = a.family_vectors(f);
                let snap = SpectralSnapshot {
                    n,
                    primal,
                    copy,
                    dual,
                    dual_hat,
                };
                let old = a.pen.get(f);
                let out = ap_update(&mut self.history.slots[i][fi], snap, old, &self.ap);
                if out.case == ApCase::Initial {
                    continue;
                }
                a.pen.set(f, out.penalty);
                self.updates.push(PenaltyUpdate {
                    iteration: n,
                    agent: i,
                    family: f,
                    old,
                    new: out.penalty,
                    rule: format!("ap:{}", serde_case(out.case)),
                });
            }
        }
    }

    fn apply_na(&mut self, state: &mut ConsensusState) -> bool {
        let hat = self.na_hat.take().expect("begin_iteration called");
        let c = combined_residual(state, &hat);
        let step = self.na.step(c);
        let cur = state.clone();
        let prev = self.na_prev.take().unwrap_or_else(|| cur.clone());
        for ((dst, c), p) in state.agents.iter_mut().zip(&cur.agents).zip(&prev.agents) {
            if step.restart {
                restore(dst, p);
            } else {
                extrapolate(dst, c, p, step.weight);
            }
        }
        self.na_prev = Some(cur);
        step.restart
    }

    pub fn into_updates(self) -> Vec<PenaltyUpdate> {
        self.updates
    }
}

fn serde_case(c: ApCase) -> &'static str {
    match c {
        ApCase::Both => "both",
        ApCase::AlphaOnly => "alpha",
        ApCase::BetaOnly => "beta",
        ApCase::Unchanged => "unchanged",
        ApCase::Initial => "initial",
    }
}
