//! Downstream policy optimization over pre-trained skills.
//!
//! The agent acts through a two-level factorization: a semantic head
//! picks a skill id `k`, an execution head picks a latent `z`, and the
//! frozen decoder turns `(s, k, z)` into low-level actions for a
//! window of `H` environment steps. Training is an off-policy
//! actor-critic over these windows. The reward blends the summed
//! environment reward with the discriminator log-odds, and the policy
//! is tied to its pre-trained priors by three KL penalties: toward the
//! demonstration prior (weighted by `D(s)`), toward the task-agnostic
//! semantic prior (weighted by `1 - D(s)`), and toward the execution
//! prior. The discrete head trains by exact expectation over skills;
//! the continuous head by reparameterized samples.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ckpt::{load_params, save_params, CkptError};
use crate::data::one_hot;
use crate::env::{EnvError, EnvSpec, SimEnv};
use crate::rng::stream;
use crate::skillmodel::priors::mlp_sizes;
use crate::skillmodel::{Discriminator, ExecPrior, ProgressModel, SemanticPrior, SkillVae};
use crate::tensor::dist::{
    ce_categorical_probs, floored_log, kl_categorical_probs, nodes_cat_kl, nodes_gauss_head,
    nodes_gauss_kl, nodes_reparam, nodes_squash, sample_squashed,
};
use crate::tensor::{
    CatDist, DualVariable, GaussDist, Graph, Mlp, NodeId, Norm, OptVariant, ParamSet, Tensor,
    TensorError, EPS_P,
};

/// Squash bound of the execution head: latents live in `(-2, 2)^d`.
pub const LATENT_BOUND: f64 = 2.0;

#[derive(Debug, Error)]
pub enum RlError {
    #[error("missing pre-trained component: {0}")]
    MissingComponent(&'static str),
    #[error("{what}: got {got}, want {want}")]
    DimMismatch { what: &'static str, got: usize, want: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite {0}")]
    NonFinite(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

// ── configuration ───────────────────────────────────────────────────

/// One regularization weight: a constant, or a Lagrange multiplier
/// tuned toward a divergence target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AlphaMode {
    Fixed(f64),
    Dual { init: f64, target: f64, lr: f64 },
}

/// Component removals used by the ablation studies. `no_temp_agg` is
/// consumed upstream when matches are built (single-state skill
/// distributions instead of aggregated ones); the trainer carries it
/// untouched so one config describes the whole run.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AblationFlags {
    /// Regularize toward the demonstration prior everywhere (weight 1)
    /// instead of gating by the discriminator.
    pub no_d_weight: bool,
    /// Drop the demonstration term; task-agnostic weight becomes 1.
    pub no_demo_reg: bool,
    /// Use the raw environment reward, no discriminator blending.
    pub no_d_reward: bool,
    /// Single-state matching upstream; no effect on the trainer.
    pub no_temp_agg: bool,
    /// No execution latent: deterministic decoder, no execution head.
    pub no_z: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlConfig {
    /// Discount over skill windows.
    pub discount: f64,
    /// Reward mix: `r = (1-kappa) * R + kappa * log-odds D(s)`.
    pub kappa: f64,
    pub alpha_q: AlphaMode,
    pub alpha_p: AlphaMode,
    pub alpha_l: AlphaMode,
    /// Env steps per skill window.
    pub horizon: usize,
    /// Env steps collected before the first gradient update.
    pub warmup_env_steps: usize,
    pub batch: usize,
    pub buffer_capacity: usize,
    pub policy_lr: f64,
    pub critic_lr: f64,
    /// Target-net soft-update rate.
    pub tau: f64,
    pub critic_hidden: usize,
    pub critic_layers: usize,
    pub total_env_steps: usize,
    pub updates_per_skill_step: usize,
    /// Episodes of the greedy final evaluation.
    pub eval_episodes: usize,
    /// Scale the discriminator reward term by `P(s)` once `P(s) >= 1/2`.
    pub progress_shaping: bool,
    /// Variant of progress shaping: gate on `D(s) >= 1/2` and scale the
    /// whole mixed reward instead of the discriminator term alone.
    pub gate_on_discriminator: bool,
    /// Swap which side of the mix `kappa` multiplies.
    pub swap_kappa: bool,
    /// Drop the environment reward; learn from the discriminator only.
    pub imitation_only: bool,
    /// Behavior-cloning style regularization: replace the weighted
    /// demonstration KL with a plain cross-entropy against the
    /// demonstration skill prior, applied at every state with weight
    /// `alpha_q`, and drop the transfer-average semantic term. The
    /// execution-prior term keeps its usual form.
    pub bc_reg: bool,
    pub ablations: AblationFlags,
}

impl RlConfig {
    /// Desk-scale defaults; `alpha` seeds all three fixed weights.
    pub fn defaults(alpha: f64) -> Self {
        RlConfig {
            discount: 0.99,
            kappa: 0.9,
            alpha_q: AlphaMode::Fixed(alpha),
            alpha_p: AlphaMode::Fixed(alpha),
            alpha_l: AlphaMode::Fixed(alpha),
            horizon: 10,
            warmup_env_steps: 500,
            batch: 64,
            buffer_capacity: 100_000,
            policy_lr: 3e-4,
            critic_lr: 3e-4,
            tau: 5e-3,
            critic_hidden: 64,
            critic_layers: 2,
            total_env_steps: 40_000,
            updates_per_skill_step: 1,
            eval_episodes: 20,
            progress_shaping: false,
            gate_on_discriminator: false,
            swap_kappa: false,
            imitation_only: false,
            bc_reg: false,
            ablations: AblationFlags::default(),
        }
    }

    pub fn validate(&self) -> Result<(), RlError> {
        let bad = |msg: String| Err(RlError::Config(msg));
        if !(0.0..=1.0).contains(&self.kappa) {
            return bad(format!("kappa {} outside [0, 1]", self.kappa));
        }
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return bad(format!("discount {} outside (0, 1)", self.discount));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad(format!("tau {} outside (0, 1]", self.tau));
        }
        if self.horizon == 0 || self.batch == 0 || self.buffer_capacity == 0 {
            return bad("horizon, batch and buffer must be positive".into());
        }
        if self.ablations.no_d_weight && self.ablations.no_demo_reg {
            return bad("no_d_weight and no_demo_reg are mutually exclusive".into());
        }
        if self.imitation_only && self.ablations.no_d_reward {
            return bad("imitation_only with no_d_reward leaves no reward".into());
        }
        if self.imitation_only && self.kappa == 0.0 {
            return bad("imitation_only with kappa = 0 leaves no reward".into());
        }
        if self.gate_on_discriminator && !self.progress_shaping {
            return bad("gate_on_discriminator requires progress_shaping".into());
        }
        if self.progress_shaping && self.ablations.no_d_reward {
            return bad("progress_shaping has no effect with no_d_reward".into());
        }
        if self.bc_reg && self.ablations.no_demo_reg {
            return bad("bc_reg needs the demonstration prior term".into());
        }
        if self.bc_reg && self.ablations.no_d_weight {
            return bad("bc_reg already ignores the discriminator weighting".into());
        }
        Ok(())
    }
}

/// Runtime state of one regularization weight.
#[derive(Debug, Clone)]
pub enum Alpha {
    Fixed(f64),
    Dual(DualVariable),
}

impl Alpha {
    pub fn from_mode(mode: AlphaMode) -> Self {
        match mode {
            AlphaMode::Fixed(v) => Alpha::Fixed(v),
            AlphaMode::Dual { init, target, lr } => Alpha::Dual(DualVariable::new(init, target, lr)),
        }
    }

    pub fn value(&self) -> f64 {
        match self {
            Alpha::Fixed(v) => *v,
            Alpha::Dual(d) => d.value(),
        }
    }

    /// One dual step against a measured divergence; fixed weights and
    /// non-finite measurements (a term absent from this config) are
    /// left untouched.
    pub fn observe(&mut self, measured: f64) -> Result<f64, RlError> {
        match self {
            Alpha::Fixed(v) => Ok(*v),
            Alpha::Dual(d) => {
                if !measured.is_finite() {
                    return Ok(d.value());
                }
                Ok(d.update(measured)?)
            }
        }
    }
}

// ── component bundles ───────────────────────────────────────────────

/// Models trained on task-agnostic data, before any demonstration is
/// seen: the skill decoder and its priors.
pub struct PretrainBundle {
    pub vae: SkillVae,
    /// Absent only for the no-latent decoder variant.
    pub exec_prior: Option<ExecPrior>,
    pub ta_prior: SemanticPrior,
}

/// Models trained on matched demonstration states.
pub struct DemoModels {
    pub demo_prior: SemanticPrior,
    pub disc: Discriminator,
    pub progress: Option<ProgressModel>,
}

/// Borrowed view of every frozen model an update step may touch.
pub struct FrozenModels<'a> {
    pub ta_prior: &'a SemanticPrior,
    pub exec_prior: Option<&'a ExecPrior>,
    pub demo_prior: Option<&'a SemanticPrior>,
    pub disc: Option<&'a Discriminator>,
    pub progress: Option<&'a ProgressModel>,
}

impl<'a> FrozenModels<'a> {
    pub fn assemble(bundle: &'a PretrainBundle, demo: Option<&'a DemoModels>) -> Self {
        FrozenModels {
            ta_prior: &bundle.ta_prior,
            exec_prior: bundle.exec_prior.as_ref(),
            demo_prior: demo.map(|d| &d.demo_prior),
            disc: demo.map(|d| &d.disc),
            progress: demo.and_then(|d| d.progress.as_ref()),
        }
    }
}

// ── high-level policy ───────────────────────────────────────────────

/// The trainable pair of heads. The semantic head mirrors the
/// architecture of the prior it is initialized from (demonstration
/// prior when demonstration models are present, task-agnostic prior
/// otherwise); the execution head mirrors the execution prior and its
/// samples are squashed into `(-LATENT_BOUND, LATENT_BOUND)`.
pub struct HighLevelPolicy {
    pub params: ParamSet,
    sem: Mlp,
    lat: Option<Mlp>,
    pub obs_dim: usize,
    pub n_skills: usize,
    pub latent: usize,
}

impl HighLevelPolicy {
    pub fn new(bundle: &PretrainBundle, demo: Option<&DemoModels>, no_z: bool) -> Self {
        let src = demo.map(|d| &d.demo_prior).unwrap_or(&bundle.ta_prior);
        let c = &src.cfg;
        let sem = Mlp::new("pi.sem", &mlp_sizes(c.obs_dim, c.hidden, c.layers, c.n_skills), Norm::None);
        let mut params = ParamSet::new();
        params.adopt("pi.sem", &src.params, "sem.mlp");
        let mut lat = None;
        let mut latent = 0;
        if !no_z {
            let exec = bundle.exec_prior.as_ref().expect("execution prior (validated)");
            let e = &exec.cfg;
            let m = Mlp::new(
                "pi.lat",
                &mlp_sizes(e.obs_dim + e.n_skills, e.hidden, e.layers, 2 * e.latent),
                Norm::None,
            );
            params.adopt("pi.lat", &exec.params, "exec.mlp");
            latent = e.latent;
            lat = Some(m);
        }
        HighLevelPolicy { params, sem, lat, obs_dim: c.obs_dim, n_skills: c.n_skills, latent }
    }

    pub fn sem_mlp(&self) -> &Mlp {
        &self.sem
    }

    pub fn lat_mlp(&self) -> Option<&Mlp> {
        self.lat.as_ref()
    }

    pub fn sem_dist_rows(&self, obs: &[Vec<f64>]) -> CatDist {
        CatDist::new(self.sem.forward_plain(&self.params, &Tensor::from_rows(obs)))
    }

    pub fn sem_dist(&self, obs: &[f64]) -> CatDist {
        CatDist::new(self.sem.forward_plain(&self.params, &Tensor::row_vec(obs.to_vec())))
    }

    fn lat_input(&self, obs: &[Vec<f64>], skills: &[usize]) -> Tensor {
        debug_assert_eq!(obs.len(), skills.len());
        let rows: Vec<Vec<f64>> = obs
            .iter()
            .zip(skills)
            .map(|(o, &k)| {
                let mut row = o.clone();
                row.extend_from_slice(&one_hot(k, self.n_skills));
                row
            })
            .collect();
        Tensor::from_rows(&rows)
    }

    /// Pre-squash execution distributions, one row per `(state, skill)`.
    pub fn lat_dist_rows(&self, obs: &[Vec<f64>], skills: &[usize]) -> GaussDist {
        let lat = self.lat.as_ref().expect("execution head");
        GaussDist::from_head(&lat.forward_plain(&self.params, &self.lat_input(obs, skills)))
    }

    pub fn lat_dist(&self, obs: &[f64], skill: usize) -> GaussDist {
        self.lat_dist_rows(std::slice::from_ref(&obs.to_vec()), &[skill])
    }

    /// Greedy latent: the squashed mean. Empty without an execution head.
    pub fn lat_mean(&self, obs: &[f64], skill: usize) -> Vec<f64> {
        match &self.lat {
            None => Vec::new(),
            Some(_) => {
                let d = self.lat_dist(obs, skill);
                d.mean.row(0).iter().map(|m| LATENT_BOUND * m.tanh()).collect()
            }
        }
    }

    /// Samples `(k, z)` for collection; `z` is squashed.
    pub fn act(&self, obs: &[f64], rng: &mut ChaCha8Rng) -> (usize, Vec<f64>) {
        let k = self.sem_dist(obs).sample_row(0, rng);
        let z = match &self.lat {
            None => Vec::new(),
            Some(_) => {
                let d = self.lat_dist(obs, k);
                let (z, _) = sample_squashed(&d, LATENT_BOUND, rng);
                z.row(0).to_vec()
            }
        };
        (k, z)
    }

    pub fn save(&self, path: &Path) -> Result<(), CkptError> {
        let meta = serde_json::json!({
            "obs_dim": self.obs_dim,
            "n_skills": self.n_skills,
            "latent": self.latent,
            "sem_sizes": self.sem.sizes,
            "lat_sizes": self.lat.as_ref().map(|m| m.sizes.clone()),
        });
        save_params(path, "policy", &meta, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self, CkptError> {
        let (params, meta) = load_params(path, "policy")?;
        let field = |name: &str| -> Result<usize, CkptError> {
            meta[name]
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| CkptError::Format(format!("missing meta field {name}")))
        };
        let sem_sizes: Vec<usize> = serde_json::from_value(meta["sem_sizes"].clone())
            .map_err(|e| CkptError::Format(format!("sem_sizes meta: {e}")))?;
        let lat_sizes: Option<Vec<usize>> = serde_json::from_value(meta["lat_sizes"].clone())
            .map_err(|e| CkptError::Format(format!("lat_sizes meta: {e}")))?;
        Ok(HighLevelPolicy {
            params,
            sem: Mlp::new("pi.sem", &sem_sizes, Norm::None),
            lat: lat_sizes.map(|s| Mlp::new("pi.lat", &s, Norm::None)),
            obs_dim: field("obs_dim")?,
            n_skills: field("n_skills")?,
            latent: field("latent")?,
        })
    }
}

// ── critics ─────────────────────────────────────────────────────────

/// Two independent critics mapping `(s, z)` to one Q-value per skill,
/// plus frozen target copies. The scalar Q under a semantic
/// distribution is the expectation of the vector; targets use the
/// elementwise minimum over the pair.
pub struct CriticPair {
    pub params: ParamSet,
    pub target_params: ParamSet,
    q1: Mlp,
    q2: Mlp,
    pub tau: f64,
    pub in_dim: usize,
    pub n_skills: usize,
}

impl CriticPair {
    pub fn new(in_dim: usize, n_skills: usize, hidden: usize, layers: usize, tau: f64, seed: u64) -> Self {
        let sizes = mlp_sizes(in_dim, hidden, layers, n_skills);
        let q1 = Mlp::new("q1", &sizes, Norm::None);
        let q2 = Mlp::new("q2", &sizes, Norm::None);
        let mut params = ParamSet::new();
        let mut rng = stream(seed, "critic-init");
        q1.init(&mut params, &mut rng);
        q2.init(&mut params, &mut rng);
        let target_params = params.clone();
        CriticPair { params, target_params, q1, q2, tau, in_dim, n_skills }
    }

    pub fn q1_mlp(&self) -> &Mlp {
        &self.q1
    }

    pub fn q2_mlp(&self) -> &Mlp {
        &self.q2
    }

    /// Online Q-vectors of both critics.
    pub fn q_vec(&self, input: &Tensor) -> (Tensor, Tensor) {
        (self.q1.forward_plain(&self.params, input), self.q2.forward_plain(&self.params, input))
    }

    /// Elementwise min over the target pair.
    pub fn min_target_vec(&self, input: &Tensor) -> Tensor {
        let a = self.q1.forward_plain(&self.target_params, input);
        let b = self.q2.forward_plain(&self.target_params, input);
        let mut out = a.clone();
        for (o, bv) in out.data.iter_mut().zip(&b.data) {
            *o = o.min(*bv);
        }
        out
    }

    /// Scalar Q under a semantic distribution: `sum_k p(k) q[k]`.
    pub fn scalar_q(probs: &[f64], q_vec: &[f64]) -> f64 {
        debug_assert_eq!(probs.len(), q_vec.len());
        probs.iter().zip(q_vec).map(|(p, q)| p * q).sum()
    }

    /// `target <- tau * online + (1 - tau) * target` for every weight.
    pub fn soft_update(&mut self) {
        let names: Vec<String> = self.params.names().cloned().collect();
        for name in &names {
            let online = self.params.get(name).expect("online param").clone();
            let t = self.target_params.get_mut(name).expect("target param");
            for (tv, ov) in t.data.iter_mut().zip(&online.data) {
                *tv = self.tau * ov + (1.0 - self.tau) * *tv;
            }
        }
    }
}

// ── replay ──────────────────────────────────────────────────────────

/// One skill-level transition: the state where the skill was chosen,
/// the chosen pair, the reward summed over the window, and the state
/// after the window. `terminal` marks a true task end (success), not a
/// time-limit cut, so bootstrapping stops only where the task did.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayTransition {
    pub s: Vec<f64>,
    pub k: usize,
    pub z: Vec<f64>,
    pub r_sum: f64,
    pub s_next: Vec<f64>,
    pub terminal: bool,
    pub env_steps: usize,
}

/// Fixed-capacity FIFO.
pub struct ReplayBuffer {
    cap: usize,
    items: VecDeque<ReplayTransition>,
}

impl ReplayBuffer {
    pub fn new(cap: usize) -> Self {
        assert!(cap > 0, "capacity must be positive");
        ReplayBuffer { cap, items: VecDeque::new() }
    }

    pub fn push(&mut self, t: ReplayTransition) {
        if self.items.len() == self.cap {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, i: usize) -> &ReplayTransition {
        &self.items[i]
    }

    /// Uniform indices with replacement.
    pub fn sample_idx(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        use rand::Rng;
        (0..n).map(|_| rng.gen_range(0..self.items.len())).collect()
    }
}

// ── reward shaping ──────────────────────────────────────────────────

/// Regularization weights `(demo, task-agnostic)` for one state. They
/// always partition 1: the flags replace the discriminator output with
/// a constant rather than dropping the budget.
pub fn reg_weights(d: f64, flags: &AblationFlags) -> (f64, f64) {
    if flags.no_demo_reg {
        (0.0, 1.0)
    } else if flags.no_d_weight {
        (1.0, 0.0)
    } else {
        (d, 1.0 - d)
    }
}

/// Blended reward for one stored window. `d` and `p` are the
/// discriminator and progress outputs at the state where the skill was
/// chosen; both are ignored by configs that do not query them.
pub fn shaped_reward(r_sum: f64, d: f64, p: f64, cfg: &RlConfig) -> f64 {
    if cfg.ablations.no_d_reward {
        return r_sum;
    }
    let d = d.clamp(EPS_P, 1.0 - EPS_P);
    let mut rd = d.ln() - (1.0 - d).ln();
    // Shape the discriminator term by demonstration progress once the
    // progress estimate is confident.
    if cfg.progress_shaping && !cfg.gate_on_discriminator && p >= 0.5 {
        rd *= p;
    }
    let (env_w, disc_w) =
        if cfg.swap_kappa { (cfg.kappa, 1.0 - cfg.kappa) } else { (1.0 - cfg.kappa, cfg.kappa) };
    let mut r = if cfg.imitation_only { disc_w * rd } else { env_w * r_sum + disc_w * rd };
    // Pseudocode-literal variant: gate on the discriminator and scale
    // the whole mix.
    if cfg.progress_shaping && cfg.gate_on_discriminator && d >= 0.5 {
        r *= p;
    }
    r
}

// ── collection ──────────────────────────────────────────────────────

/// Samples one skill pair and runs the decoder for up to `horizon`
/// env steps (fewer if the episode ends). The returned window carries
/// the summed raw reward; shaping happens at update time.
pub fn collect_skill_step(
    env: &mut SimEnv,
    policy: &HighLevelPolicy,
    vae: &SkillVae,
    horizon: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ReplayTransition, RlError> {
    assert!(!env.done(), "collect_skill_step needs a live episode");
    let s = env.observe();
    let (k, z) = policy.act(&s, rng);
    let mut r_sum = 0.0;
    let mut steps = 0;
    let mut terminal = false;
    for _ in 0..horizon {
        let a = vae.decode_mean(&env.observe(), k, &z);
        let res = env.step(&a)?;
        r_sum += res.reward;
        steps += 1;
        if res.done {
            terminal = res.success;
            break;
        }
    }
    Ok(ReplayTransition { s, k, z, r_sum, s_next: env.observe(), terminal, env_steps: steps })
}

// ── target computation ──────────────────────────────────────────────

fn check_models(models: &FrozenModels, cfg: &RlConfig) -> Result<(), RlError> {
    let fl = &cfg.ablations;
    let needs_rd = !fl.no_d_reward && (cfg.kappa > 0.0 || cfg.imitation_only);
    let needs_weight_d = !fl.no_demo_reg && !fl.no_d_weight && !cfg.bc_reg;
    if (needs_rd || needs_weight_d) && models.disc.is_none() {
        return Err(RlError::MissingComponent("discriminator"));
    }
    if !fl.no_demo_reg && models.demo_prior.is_none() {
        return Err(RlError::MissingComponent("demonstration skill prior"));
    }
    if cfg.progress_shaping && models.progress.is_none() {
        return Err(RlError::MissingComponent("progress model"));
    }
    if !fl.no_z && models.exec_prior.is_none() {
        return Err(RlError::MissingComponent("execution prior"));
    }
    Ok(())
}

/// Bootstrapped regression targets, one per transition.
///
/// `Q-target = r + discount * (E_k[min-target-Q] - penalty)` with the
/// penalty holding all three KL terms at the successor state, weighted
/// like the policy objective; terminal windows stop at `r`.
///
/// Draw order (for exact replication in tests): one uniform draw per
/// row for the successor skill, rows in order, then one batched
/// standard-normal draw for the successor latent, rows in order.
pub fn q_target(
    batch: &[&ReplayTransition],
    policy: &HighLevelPolicy,
    critics: &CriticPair,
    models: &FrozenModels,
    alphas: [f64; 3],
    cfg: &RlConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>, RlError> {
    check_models(models, cfg)?;
    let b = batch.len();
    let fl = &cfg.ablations;
    let needs_rd = !fl.no_d_reward && (cfg.kappa > 0.0 || cfg.imitation_only);
    let needs_weight_d = !fl.no_demo_reg && !fl.no_d_weight && !cfg.bc_reg;

    // Shaped reward at the stored state.
    let mut r_tilde = Vec::with_capacity(b);
    for t in batch {
        let d = if needs_rd { models.disc.unwrap().prob(&t.s) } else { 0.5 };
        let p = if cfg.progress_shaping { models.progress.unwrap().predict(&t.s) } else { 0.0 };
        r_tilde.push(shaped_reward(t.r_sum, d, p, cfg));
    }

    let next: Vec<Vec<f64>> = batch.iter().map(|t| t.s_next.clone()).collect();
    let sem = policy.sem_dist_rows(&next);
    let probs: Vec<Vec<f64>> = (0..b).map(|r| sem.probs_row(r)).collect();

    // Successor draws (see doc comment for the order).
    let k_next: Vec<usize> = (0..b).map(|r| sem.sample_row(r, rng)).collect();
    let critic_in = if fl.no_z {
        Tensor::from_rows(&next)
    } else {
        let lat = policy.lat_dist_rows(&next, &k_next);
        let (z, _) = sample_squashed(&lat, LATENT_BOUND, rng);
        let rows: Vec<Vec<f64>> = (0..b)
            .map(|r| {
                let mut row = next[r].clone();
                row.extend_from_slice(z.row(r));
                row
            })
            .collect();
        Tensor::from_rows(&rows)
    };
    let min_q = critics.min_target_vec(&critic_in);

    let demo_probs = models.demo_prior.map(|p| p.probs_rows(&next));
    let ta_probs = models.ta_prior.probs_rows(&next);

    // Exact expectation over skills for the execution-prior KL.
    let mut kl_lat = vec![0.0; b];
    if !fl.no_z {
        let exec = models.exec_prior.unwrap();
        for k in 0..policy.n_skills {
            let ks = vec![k; b];
            let pol = policy.lat_dist_rows(&next, &ks);
            let pri = exec.dist_rows(&next, &ks);
            let kls = pol.kl_to(&pri);
            for r in 0..b {
                kl_lat[r] += probs[r][k] * kls[r];
            }
        }
    }

    let mut targets = Vec::with_capacity(b);
    for r in 0..b {
        if batch[r].terminal {
            targets.push(r_tilde[r]);
            continue;
        }
        let q_next = CriticPair::scalar_q(&probs[r], min_q.row(r));
        let penalty = if cfg.bc_reg {
            // Cross-entropy to the demonstration prior, unweighted, no
            // transfer-average term; the execution term keeps its form.
            let ce = ce_categorical_probs(&probs[r], demo_probs.as_ref().unwrap().row(r));
            alphas[0] * ce + alphas[2] * kl_lat[r]
        } else {
            let d_next = if needs_weight_d { models.disc.unwrap().prob(&next[r]) } else { 0.5 };
            let (wd, wt) = reg_weights(d_next, fl);
            let kl_demo = demo_probs
                .as_ref()
                .map(|tbl| kl_categorical_probs(&probs[r], tbl.row(r)))
                .unwrap_or(0.0);
            let kl_ta = kl_categorical_probs(&probs[r], ta_probs.row(r));
            alphas[0] * wd * kl_demo + alphas[1] * wt * kl_ta + alphas[2] * kl_lat[r]
        };
        targets.push(r_tilde[r] + cfg.discount * (q_next - penalty));
    }
    Ok(targets)
}

// ── policy update ───────────────────────────────────────────────────

/// Per-update summary; KLs are unweighted batch means. Terms absent
/// from the configuration report NaN, and under `bc_reg` the demo slot
/// holds the cross-entropy instead of the KL.
#[derive(Debug, Clone, Copy)]
pub struct PolicyStats {
    pub loss: f64,
    pub mean_q: f64,
    pub kl_sem_demo: f64,
    pub kl_sem_ta: f64,
    pub kl_lat: f64,
    pub mean_d: f64,
}

/// Everything the policy loss consumes besides the trainable weights;
/// pre-drawn so the same loss can be rebuilt for finite differencing.
struct PolicyBatch {
    obs: Tensor,
    lat_in_sample: Tensor,
    eps: Tensor,
    lat_in_k: Vec<Tensor>,
    exec_mean_k: Vec<Tensor>,
    exec_lv_k: Vec<Tensor>,
    log_pdemo: Option<Tensor>,
    log_pta: Tensor,
    /// `alpha_q * demo-weight` per row.
    wq: Tensor,
    /// `alpha_p * task-agnostic weight` per row.
    wp: Tensor,
    mean_d: f64,
}

fn prepare_policy_batch(
    batch: &[&ReplayTransition],
    policy: &HighLevelPolicy,
    models: &FrozenModels,
    alphas: [f64; 3],
    cfg: &RlConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PolicyBatch, RlError> {
    check_models(models, cfg)?;
    let b = batch.len();
    let fl = &cfg.ablations;
    let obs_rows: Vec<Vec<f64>> = batch.iter().map(|t| t.s.clone()).collect();
    let obs = Tensor::from_rows(&obs_rows);

    // Conditioning draws for the reparameterized latent path.
    let (lat_in_sample, eps) = if fl.no_z {
        (Tensor::zeros(0, 0), Tensor::zeros(0, 0))
    } else {
        use rand_distr::StandardNormal;
        let sem = policy.sem_dist_rows(&obs_rows);
        let k_hat: Vec<usize> = (0..b).map(|r| sem.sample_row(r, rng)).collect();
        let mut eps = Tensor::zeros(b, policy.latent);
        for v in &mut eps.data {
            *v = rand::Rng::sample(rng, StandardNormal);
        }
        (policy.lat_input(&obs_rows, &k_hat), eps)
    };

    // Frozen execution-prior heads per skill.
    let mut lat_in_k = Vec::new();
    let mut exec_mean_k = Vec::new();
    let mut exec_lv_k = Vec::new();
    if !fl.no_z {
        let exec = models.exec_prior.unwrap();
        for k in 0..policy.n_skills {
            let ks = vec![k; b];
            lat_in_k.push(policy.lat_input(&obs_rows, &ks));
            let pri = exec.dist_rows(&obs_rows, &ks);
            exec_mean_k.push(pri.mean);
            exec_lv_k.push(pri.logvar);
        }
    }

    let log_pdemo = models.demo_prior.filter(|_| !fl.no_demo_reg).map(|p| {
        floored_log(&p.probs_rows(&obs_rows))
    });
    let log_pta = floored_log(&models.ta_prior.probs_rows(&obs_rows));

    let needs_weight_d = !fl.no_demo_reg && !fl.no_d_weight && !cfg.bc_reg;
    let mut wq = Tensor::zeros(b, 1);
    let mut wp = Tensor::zeros(b, 1);
    let mut mean_d = f64::NAN;
    if let Some(disc) = models.disc {
        mean_d = obs_rows.iter().map(|s| disc.prob(s)).sum::<f64>() / b as f64;
    }
    for r in 0..b {
        if cfg.bc_reg {
            // Flat cross-entropy weight; the transfer-average term is off.
            wq.data[r] = alphas[0];
            continue;
        }
        let d = if needs_weight_d { models.disc.unwrap().prob(&obs_rows[r]) } else { 0.5 };
        let (wd, wt) = reg_weights(d, fl);
        wq.data[r] = alphas[0] * wd;
        wp.data[r] = alphas[1] * wt;
    }

    Ok(PolicyBatch { obs, lat_in_sample, eps, lat_in_k, exec_mean_k, exec_lv_k, log_pdemo, log_pta, wq, wp, mean_d })
}

struct PolicyLossNodes {
    loss: NodeId,
    q_rows: NodeId,
    /// Under `bc_reg` this holds the cross-entropy instead of the KL.
    kl_demo: Option<NodeId>,
    kl_ta: Option<NodeId>,
    kl_lat: Option<NodeId>,
}

/// Builds the policy objective on the tape: expected min-critic value
/// minus the three weighted KL penalties, negated into a loss. The
/// skill expectation is exact; only the latent path samples.
fn policy_loss(
    g: &mut Graph,
    params: &ParamSet,
    policy: &HighLevelPolicy,
    critics: &CriticPair,
    pb: &PolicyBatch,
    alphas: [f64; 3],
    cfg: &RlConfig,
) -> PolicyLossNodes {
    let fl = &cfg.ablations;
    let x = g.input(pb.obs.clone());
    let logits = policy.sem.forward(g, params, x, true);
    let lp = g.log_softmax_rows(logits);
    let probs = g.exp(lp);

    let critic_in = if fl.no_z {
        x
    } else {
        let lat = policy.lat.as_ref().expect("execution head");
        let lx = g.input(pb.lat_in_sample.clone());
        let head = lat.forward(g, params, lx, true);
        let (m, lv) = nodes_gauss_head(g, head);
        let eps = g.input(pb.eps.clone());
        let u = nodes_reparam(g, m, lv, eps);
        let z = nodes_squash(g, u, LATENT_BOUND);
        g.concat_cols(&[x, z])
    };
    let q1 = critics.q1.forward(g, &critics.params, critic_in, false);
    let q2 = critics.q2.forward(g, &critics.params, critic_in, false);
    let qmin = g.min(q1, q2);
    let qw = g.mul(probs, qmin);
    let q_rows = g.sum_rows(qw);

    let mut penalty_terms: Vec<NodeId> = Vec::new();
    let kl_demo = pb.log_pdemo.as_ref().map(|tbl| {
        let lq = g.input(tbl.clone());
        let rows = if cfg.bc_reg {
            // Cross-entropy drops the policy-entropy half of the KL.
            let weighted = g.mul(probs, lq);
            let s = g.sum_rows(weighted);
            g.neg(s)
        } else {
            nodes_cat_kl(g, logits, lq)
        };
        let w = g.input(pb.wq.clone());
        penalty_terms.push(g.mul(rows, w));
        rows
    });
    let kl_ta = if cfg.bc_reg {
        None
    } else {
        let lq = g.input(pb.log_pta.clone());
        let rows = nodes_cat_kl(g, logits, lq);
        let w = g.input(pb.wp.clone());
        penalty_terms.push(g.mul(rows, w));
        Some(rows)
    };
    let kl_lat = if fl.no_z {
        None
    } else {
        let lat = policy.lat.as_ref().expect("execution head");
        let mut cols = Vec::with_capacity(policy.n_skills);
        for k in 0..policy.n_skills {
            let xk = g.input(pb.lat_in_k[k].clone());
            let head = lat.forward(g, params, xk, true);
            let (m, lv) = nodes_gauss_head(g, head);
            let pm = g.input(pb.exec_mean_k[k].clone());
            let plv = g.input(pb.exec_lv_k[k].clone());
            cols.push(nodes_gauss_kl(g, (m, lv), (pm, plv)));
        }
        let mat = g.concat_cols(&cols);
        let wm = g.mul(probs, mat);
        let rows = g.sum_rows(wm);
        penalty_terms.push(g.scale(rows, alphas[2]));
        Some(rows)
    };

    let mut obj = g.neg(q_rows);
    for t in penalty_terms {
        obj = g.add(obj, t);
    }
    let loss = g.mean(obj);
    PolicyLossNodes { loss, q_rows, kl_demo, kl_ta, kl_lat }
}

/// One gradient step on both policy heads. Ascends the expected
/// min-critic value minus the weighted KL penalties; critics and
/// priors stay frozen. A non-finite loss aborts with diagnostics.
pub fn policy_update(
    batch: &[&ReplayTransition],
    policy: &mut HighLevelPolicy,
    critics: &CriticPair,
    models: &FrozenModels,
    alphas: [f64; 3],
    cfg: &RlConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PolicyStats, RlError> {
    let pb = prepare_policy_batch(batch, policy, models, alphas, cfg, rng)?;
    let mut g = Graph::new();
    let nodes = policy_loss(&mut g, &policy.params, policy, critics, &pb, alphas, cfg);
    let mean_of = |g: &Graph, id: NodeId| {
        let t = g.value(id);
        t.data.iter().sum::<f64>() / t.rows as f64
    };
    let stats = PolicyStats {
        loss: g.value(nodes.loss).item(),
        mean_q: mean_of(&g, nodes.q_rows),
        kl_sem_demo: nodes.kl_demo.map(|n| mean_of(&g, n)).unwrap_or(f64::NAN),
        kl_sem_ta: nodes.kl_ta.map(|n| mean_of(&g, n)).unwrap_or(f64::NAN),
        kl_lat: nodes.kl_lat.map(|n| mean_of(&g, n)).unwrap_or(f64::NAN),
        mean_d: pb.mean_d,
    };
    if !stats.loss.is_finite() {
        return Err(RlError::NonFinite(format!(
            "policy loss {}; mean_q={} kl_sem_demo={} kl_sem_ta={} kl_lat={}",
            stats.loss, stats.mean_q, stats.kl_sem_demo, stats.kl_sem_ta, stats.kl_lat
        )));
    }
    let grads = g.backward(nodes.loss)?;
    policy.params.step(&grads.by_param, cfg.policy_lr, OptVariant::Adam)?;
    Ok(stats)
}

// ── critic update ───────────────────────────────────────────────────

/// Regresses both critics toward shared targets with a half-MSE loss at
/// the stored skill index, then soft-updates the target nets.
pub fn critic_update(
    batch: &[&ReplayTransition],
    critics: &mut CriticPair,
    targets: &[f64],
    cfg: &RlConfig,
) -> Result<f64, RlError> {
    assert_eq!(batch.len(), targets.len(), "one target per transition");
    let rows: Vec<Vec<f64>> = batch
        .iter()
        .map(|t| {
            let mut row = t.s.clone();
            row.extend_from_slice(&t.z);
            row
        })
        .collect();
    let ks: Vec<usize> = batch.iter().map(|t| t.k).collect();
    let y_rows: Vec<Vec<f64>> = targets.iter().map(|&v| vec![v]).collect();

    let mut g = Graph::new();
    let x = g.input(Tensor::from_rows(&rows));
    let y = g.input(Tensor::from_rows(&y_rows));
    let half_mse = |g: &mut Graph, mlp: &Mlp| {
        let qv = mlp.forward(g, &critics.params, x, true);
        let qk = g.take_per_row(qv, &ks);
        let d = g.sub(qk, y);
        let sq = g.square(d);
        let m = g.mean(sq);
        g.scale(m, 0.5)
    };
    let l1 = half_mse(&mut g, &critics.q1);
    let l2 = half_mse(&mut g, &critics.q2);
    let loss = g.add(l1, l2);
    let lv = g.value(loss).item();
    if !lv.is_finite() {
        return Err(RlError::NonFinite(format!("critic loss {lv}")));
    }
    let grads = g.backward(loss)?;
    critics.params.step(&grads.by_param, cfg.critic_lr, OptVariant::Adam)?;
    critics.soft_update();
    Ok(lv)
}

// ── metrics ─────────────────────────────────────────────────────────

/// One completed training episode. KL, alpha and discriminator columns
/// repeat the most recent update's measurements (NaN before the first
/// update or for terms absent from the configuration).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub env_step: usize,
    pub episode: usize,
    pub success: bool,
    pub subtasks: usize,
    pub ret: f64,
    pub kl_sem_demo: f64,
    pub kl_sem_ta: f64,
    pub kl_lat: f64,
    pub alpha_q: f64,
    pub alpha_p: f64,
    pub alpha_l: f64,
    pub mean_d: f64,
}

pub const METRICS_HEADER: &str =
    "env-step,episode,success,subtasks,return,kl_sem_demo,kl_sem_ta,kl_lat,alpha_q,alpha_p,alpha_l,mean_D";

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.env_step,
            r.episode,
            r.success as u8,
            r.subtasks,
            r.ret,
            r.kl_sem_demo,
            r.kl_sem_ta,
            r.kl_lat,
            r.alpha_q,
            r.alpha_p,
            r.alpha_l,
            r.mean_d
        )?;
    }
    out.flush()
}

// ── evaluation ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub success_rate: f64,
    pub mean_subtasks: f64,
    pub mean_return: f64,
}

/// Greedy rollouts: argmax skill, squashed-mean latent, decoder mean.
/// Reads the policy without touching it.
pub fn evaluate(
    spec: &EnvSpec,
    policy: &HighLevelPolicy,
    vae: &SkillVae,
    horizon: usize,
    episodes: usize,
    seed: u64,
) -> Result<EvalStats, RlError> {
    assert!(episodes > 0, "need at least one episode");
    let mut rng = stream(seed, "rl-eval");
    let mut env = spec.make();
    let mut successes = 0usize;
    let mut subtasks = 0usize;
    let mut ret_total = 0.0;
    for _ in 0..episodes {
        env.reset(&mut rng);
        while !env.done() {
            let s = env.observe();
            let k = policy.sem_dist(&s).argmax_row(0);
            let z = policy.lat_mean(&s, k);
            for _ in 0..horizon {
                if env.done() {
                    break;
                }
                let a = vae.decode_mean(&env.observe(), k, &z);
                ret_total += env.step(&a)?.reward;
            }
        }
        successes += env.success() as usize;
        subtasks += env.subtasks();
    }
    Ok(EvalStats {
        success_rate: successes as f64 / episodes as f64,
        mean_subtasks: subtasks as f64 / episodes as f64,
        mean_return: ret_total / episodes as f64,
    })
}

// ── training loop ───────────────────────────────────────────────────

pub struct TrainOutput {
    pub metrics: Vec<MetricsRow>,
    pub policy: HighLevelPolicy,
    pub critics: CriticPair,
    pub final_eval: EvalStats,
    pub updates_done: usize,
    pub first_update_env_step: Option<usize>,
    pub env_steps: usize,
}

fn validate_components(
    spec: &EnvSpec,
    bundle: &PretrainBundle,
    demo: Option<&DemoModels>,
    cfg: &RlConfig,
) -> Result<(), RlError> {
    let obs = spec.obs_dim();
    let act = spec.action_dim();
    let k = bundle.ta_prior.cfg.n_skills;
    let dim = |what: &'static str, got: usize, want: usize| {
        if got != want {
            return Err(RlError::DimMismatch { what, got, want });
        }
        Ok(())
    };
    dim("decoder observation width", bundle.vae.cfg.obs_dim, obs)?;
    dim("decoder action width", bundle.vae.cfg.action_dim, act)?;
    dim("decoder skill count", bundle.vae.cfg.n_skills, k)?;
    dim("task-agnostic prior observation width", bundle.ta_prior.cfg.obs_dim, obs)?;
    if cfg.ablations.no_z != bundle.vae.cfg.deterministic {
        return Err(RlError::Config(
            "no_z requires the deterministic decoder variant (and only then)".into(),
        ));
    }
    if let Some(exec) = &bundle.exec_prior {
        dim("execution prior observation width", exec.cfg.obs_dim, obs)?;
        dim("execution prior skill count", exec.cfg.n_skills, k)?;
        dim("execution prior latent width", exec.cfg.latent, bundle.vae.cfg.latent)?;
    }
    if let Some(d) = demo {
        dim("demonstration prior observation width", d.demo_prior.cfg.obs_dim, obs)?;
        dim("demonstration prior skill count", d.demo_prior.cfg.n_skills, k)?;
        dim("discriminator observation width", d.disc.cfg.obs_dim, obs)?;
        if let Some(p) = &d.progress {
            dim("progress model observation width", p.cfg.obs_dim, obs)?;
        }
    }
    check_models(&FrozenModels::assemble(bundle, demo), cfg)
}

fn at_update(e: RlError, n: usize) -> RlError {
    match e {
        RlError::NonFinite(msg) => RlError::NonFinite(format!("{msg} (update {n})")),
        other => other,
    }
}

/// Full run: interleaved collection and updates, one logical thread.
/// Deterministic per seed. Returns per-episode metrics, the trained
/// heads and a final greedy evaluation.
pub fn train(
    spec: &EnvSpec,
    bundle: &PretrainBundle,
    demo: Option<&DemoModels>,
    cfg: &RlConfig,
    seed: u64,
) -> Result<TrainOutput, RlError> {
    cfg.validate()?;
    validate_components(spec, bundle, demo, cfg)?;
    let models = FrozenModels::assemble(bundle, demo);
    let mut policy = HighLevelPolicy::new(bundle, demo, cfg.ablations.no_z);
    let z_dim = if cfg.ablations.no_z { 0 } else { bundle.vae.cfg.latent };
    let mut critics = CriticPair::new(
        spec.obs_dim() + z_dim,
        policy.n_skills,
        cfg.critic_hidden,
        cfg.critic_layers,
        cfg.tau,
        seed,
    );
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity);
    let mut alphas = [
        Alpha::from_mode(cfg.alpha_q),
        Alpha::from_mode(cfg.alpha_p),
        Alpha::from_mode(cfg.alpha_l),
    ];

    let mut env_rng = stream(seed, "rl-env");
    let mut collect_rng = stream(seed, "rl-collect");
    let mut batch_rng = stream(seed, "rl-batch");
    let mut target_rng = stream(seed, "rl-target");
    let mut policy_rng = stream(seed, "rl-policy");

    let mut env = spec.make();
    env.reset(&mut env_rng);
    let mut metrics = Vec::new();
    let mut episode = 0usize;
    let mut episode_return = 0.0;
    let mut steps_total = 0usize;
    let mut updates_done = 0usize;
    let mut first_update = None;
    let mut last_stats: Option<PolicyStats> = None;

    loop {
        if env.done() {
            let s = last_stats;
            metrics.push(MetricsRow {
                env_step: steps_total,
                episode,
                success: env.success(),
                subtasks: env.subtasks(),
                ret: episode_return,
                kl_sem_demo: s.map(|v| v.kl_sem_demo).unwrap_or(f64::NAN),
                kl_sem_ta: s.map(|v| v.kl_sem_ta).unwrap_or(f64::NAN),
                kl_lat: s.map(|v| v.kl_lat).unwrap_or(f64::NAN),
                alpha_q: alphas[0].value(),
                alpha_p: alphas[1].value(),
                alpha_l: alphas[2].value(),
                mean_d: s.map(|v| v.mean_d).unwrap_or(f64::NAN),
            });
            episode += 1;
            episode_return = 0.0;
            if steps_total >= cfg.total_env_steps {
                break;
            }
            env.reset(&mut env_rng);
            continue;
        }
        if steps_total >= cfg.total_env_steps {
            break;
        }

        let tr = collect_skill_step(&mut env, &policy, &bundle.vae, cfg.horizon, &mut collect_rng)?;
        steps_total += tr.env_steps;
        episode_return += tr.r_sum;
        buffer.push(tr);

        if steps_total >= cfg.warmup_env_steps && !buffer.is_empty() {
            for _ in 0..cfg.updates_per_skill_step {
                let alpha_vals = [alphas[0].value(), alphas[1].value(), alphas[2].value()];
                let idx = buffer.sample_idx(cfg.batch, &mut batch_rng);
                let rows: Vec<&ReplayTransition> = idx.iter().map(|&i| buffer.get(i)).collect();
                let targets =
                    q_target(&rows, &policy, &critics, &models, alpha_vals, cfg, &mut target_rng)
                        .map_err(|e| at_update(e, updates_done))?;
                let stats =
                    policy_update(&rows, &mut policy, &critics, &models, alpha_vals, cfg, &mut policy_rng)
                        .map_err(|e| at_update(e, updates_done))?;
                critic_update(&rows, &mut critics, &targets, cfg)
                    .map_err(|e| at_update(e, updates_done))?;
                alphas[0].observe(stats.kl_sem_demo)?;
                alphas[1].observe(stats.kl_sem_ta)?;
                alphas[2].observe(stats.kl_lat)?;
                if first_update.is_none() {
                    first_update = Some(steps_total);
                }
                updates_done += 1;
                last_stats = Some(stats);
            }
        }
    }

    let final_eval = evaluate(spec, &policy, &bundle.vae, cfg.horizon, cfg.eval_episodes, seed)?;
    Ok(TrainOutput {
        metrics,
        policy,
        critics,
        final_eval,
        updates_done,
        first_update_env_step: first_update,
        env_steps: steps_total,
    })
}
