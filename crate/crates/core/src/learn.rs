//! Fitted safety value iteration.
//!
//! A state-value network `V` is regressed onto the discounted safety target
//! `y = (1 - gamma) h(x) + gamma * min(h(x), max_u V^-(f(x, u)))`, where `V^-`
//! is a slowly blended copy of the network and the maximum runs over the
//! system's control grid. Since the dynamics are known, the safe policy is
//! the one-step greedy lookahead on `V`.
//!
//! Training data comes from rollouts of the threshold-zero switched policy
//! (nominal unless `V(f(x, pi_nom(x))) <= 0`) with uniform exploration noise,
//! collected in rounds that alternate with gradient descent.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::mlp::{Mlp, Workspace};
use crate::rng;
use crate::system::{Control, ControlGrid, ControlSystem, Environment};
use crate::value::{greedy_control, greedy_index, Constant, ValueFunction};

/// Ring buffer of `(x_t, u_t, x_{t+1})` triplets.
#[derive(Debug, Clone)]
pub struct TransitionBuffer {
    state_dim: usize,
    control_dim: usize,
    capacity: usize,
    inserted: usize,
    data: Vec<f64>,
}

impl TransitionBuffer {
    pub fn new(state_dim: usize, control_dim: usize, capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("buffer capacity must be positive".into()));
        }
        Ok(Self {
            state_dim,
            control_dim,
            capacity,
            inserted: 0,
            data: Vec::new(),
        })
    }

    fn stride(&self) -> usize {
        2 * self.state_dim + self.control_dim
    }

    pub fn push(&mut self, x: &[f64], u: &[f64], next: &[f64]) -> Result<()> {
        crate::error::check_len("buffer state", self.state_dim, x.len())?;
        crate::error::check_len("buffer control", self.control_dim, u.len())?;
        crate::error::check_len("buffer next state", self.state_dim, next.len())?;
        let stride = self.stride();
        let slot = self.inserted % self.capacity;
        if self.data.len() < (slot + 1) * stride {
            self.data.extend_from_slice(x);
            self.data.extend_from_slice(u);
            self.data.extend_from_slice(next);
        } else {
            let row = &mut self.data[slot * stride..(slot + 1) * stride];
            row[..self.state_dim].copy_from_slice(x);
            row[self.state_dim..self.state_dim + self.control_dim].copy_from_slice(u);
            row[self.state_dim + self.control_dim..].copy_from_slice(next);
        }
        self.inserted += 1;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inserted.min(self.capacity)
    }

    pub fn is_empty(&self) -> bool {
        self.inserted == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Total number of pushes, including overwritten ones.
    pub fn inserted(&self) -> usize {
        self.inserted
    }

    pub fn state(&self, i: usize) -> &[f64] {
        let s = i * self.stride();
        &self.data[s..s + self.state_dim]
    }

    pub fn control(&self, i: usize) -> &[f64] {
        let s = i * self.stride() + self.state_dim;
        &self.data[s..s + self.control_dim]
    }

    pub fn next_state(&self, i: usize) -> &[f64] {
        let s = i * self.stride() + self.state_dim + self.control_dim;
        &self.data[s..s + self.state_dim]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    /// Plain gradient descent with a fixed step.
    Sgd,
    /// Adam with the usual moment decays (0.9, 0.999).
    Adam,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub gamma: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Total gradient steps, split evenly across collection rounds.
    pub gradient_steps: usize,
    /// Target-network blend factor.
    pub tau: f64,
    /// Half-width of the uniform exploration noise per control axis.
    pub exploration_noise: f64,
    /// Episodes collected per round.
    pub episodes: usize,
    pub rounds: usize,
    pub hidden: Vec<usize>,
    /// Gradient steps regressing `V` onto `h` before fitted iteration starts,
    /// so iteration begins from `V_0 = h` like the grid solver.
    pub warm_start_steps: usize,
    pub buffer_capacity: usize,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::Adam,
            gamma: 0.999,
            learning_rate: 1e-3,
            batch_size: 64,
            gradient_steps: 20_000,
            tau: 0.005,
            exploration_noise: 0.2,
            episodes: 100,
            rounds: 5,
            hidden: vec![64, 64],
            warm_start_steps: 2_000,
            buffer_capacity: 200_000,
            log_every: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.into()));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must lie in (0, 1]");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        if self.batch_size == 0 || self.episodes == 0 || self.rounds == 0 {
            return bad("batch size, episodes and rounds must be positive");
        }
        if self.buffer_capacity == 0 || self.log_every == 0 {
            return bad("buffer capacity and log interval must be positive");
        }
        if !(self.exploration_noise >= 0.0) {
            return bad("exploration noise must be non-negative");
        }
        Ok(())
    }
}

/// `(1 - gamma) h + gamma * min(h, max_next)`.
pub fn td_target(h: f64, max_next: f64, gamma: f64) -> f64 {
    (1.0 - gamma) * h + gamma * h.min(max_next)
}

pub fn safe_policy<S, V>(sys: &S, v: &V, x: &[f64]) -> Result<Control>
where
    S: ControlSystem + ?Sized,
    V: ValueFunction + ?Sized,
{
    let controls = ControlGrid::for_system(sys)?;
    Ok(greedy_control(sys, &controls, v, x))
}

pub fn value_of<V: ValueFunction + ?Sized>(v: &V, x: &[f64]) -> f64 {
    v.value(x)
}

/// Control chosen by the threshold-zero switch: nominal unless the value
/// of the nominal successor is `<= 0`.
pub(crate) fn threshold_switch<E, V>(env: &E, controls: &ControlGrid, v: &V, x: &[f64]) -> Control
where
    E: Environment + ?Sized,
    V: ValueFunction + ?Sized,
{
    let nominal = env.nominal_control(x);
    let predicted = env.next_state(x, &nominal);
    if v.value(&predicted) <= 0.0 {
        greedy_control(env, controls, v, x)
    } else {
        nominal
    }
}

/// Roll out `episodes` episodes of the threshold-zero switched policy with
/// uniform control noise in `[-noise, noise]`, appending every step to
/// `buffer`. Episode `i` uses the stream derived from `(seed, i)`.
pub fn collect_transitions<E, V>(
    env: &E,
    v: &V,
    episodes: usize,
    noise: f64,
    seed: u64,
    buffer: &mut TransitionBuffer,
) -> Result<()>
where
    E: Environment + ?Sized,
    V: ValueFunction + ?Sized,
{
    let controls = ControlGrid::for_system(env)?;
    let horizon = env.horizon();
    for ep in 0..episodes {
        let mut r = rng::stream(seed, ep as u64);
        let mut x = env.sample_initial(&mut r);
        for _ in 0..horizon {
            let mut u = threshold_switch(env, &controls, v, &x);
            if noise > 0.0 {
                for ui in u.iter_mut() {
                    *ui += r.gen_range(-noise..=noise);
                }
            }
            env.clamp_control(&mut u);
            let next = env.next_state(&x, &u);
            buffer.push(&x, &u, &next)?;
            if env.margin(&x) <= 0.0 || env.goal_reached(&x) {
                break;
            }
            x = next;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub net: Mlp,
    /// `(gradient step, batch loss)` samples.
    pub losses: Vec<(usize, f64)>,
}

#[derive(Debug, Clone)]
struct OptimizerState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl OptimizerState {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn update(&mut self, kind: Optimizer, lr: f64, params: &mut [f64], grad: &[f64]) {
        match kind {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            Optimizer::Adam => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                self.t += 1;
                let c1 = 1.0 - libm::pow(B1, self.t as f64);
                let c2 = 1.0 - libm::pow(B2, self.t as f64);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.m[i] = B1 * self.m[i] + (1.0 - B1) * g;
                    self.v[i] = B2 * self.v[i] + (1.0 - B2) * g * g;
                    let mh = self.m[i] / c1;
                    let vh = self.v[i] / c2;
                    params[i] -= lr * mh / (libm::sqrt(vh) + EPS);
                }
            }
        }
    }
}

/// Online network, blended target network and the loss log.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub net: Mlp,
    pub target: Mlp,
    pub losses: Vec<(usize, f64)>,
    step: usize,
    ws: Workspace,
    opt: OptimizerState,
}

impl Trainer {
    pub fn new(net: Mlp) -> Self {
        Self {
            target: net.clone(),
            net,
            losses: Vec::new(),
            step: 0,
            ws: Workspace::new(),
            opt: OptimizerState::new(0),
        }
    }

    fn apply_update(&mut self, cfg: &TrainConfig, grad: &[f64]) {
        if self.opt.m.len() != grad.len() {
            self.opt = OptimizerState::new(grad.len());
        }
        self.opt
            .update(cfg.optimizer, cfg.learning_rate, self.net.params_mut(), grad);
    }

    /// Gradient steps taken so far.
    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// `steps` minibatch gradient-descent steps on the fitted-VI loss, with
    /// minibatches drawn uniformly from `buffer` using `seed`.
    pub fn run<E: Environment + ?Sized>(
        &mut self,
        env: &E,
        buffer: &TransitionBuffer,
        cfg: &TrainConfig,
        steps: usize,
        seed: u64,
    ) -> Result<()> {
        if buffer.is_empty() {
            return Err(Error::Empty("transition buffer"));
        }
        let controls = ControlGrid::for_system(env)?;
        let n = env.state_dim();
        let batch = cfg.batch_size;
        let mut r = rng::seeded(seed);
        let mut inputs = vec![0.0; batch * n];
        let mut targets = vec![0.0; batch];
        let mut grad = vec![0.0; self.net.num_params()];
        for _ in 0..steps {
            for b in 0..batch {
                let i = r.gen_range(0..buffer.len());
                let x = buffer.state(i);
                inputs[b * n..(b + 1) * n].copy_from_slice(x);
                let (_, best) = greedy_index(env, &controls, &self.target, x);
                targets[b] = td_target(env.margin(x), best, cfg.gamma);
            }
            let loss = self.net.loss_and_grad(&inputs, &targets, &mut grad, &mut self.ws);
            if !loss.is_finite() || loss > 1e6 {
                return Err(Error::Divergence {
                    step: self.step,
                    loss,
                });
            }
            self.apply_update(cfg, &grad);
            if !self.net.is_finite() {
                return Err(Error::Divergence {
                    step: self.step,
                    loss,
                });
            }
            self.target.blend_from(&self.net, cfg.tau);
            if self.step % cfg.log_every == 0 {
                self.losses.push((self.step, loss));
            }
            self.step += 1;
        }
        Ok(())
    }

    /// Regress the network onto the failure margin, then reset the target
    /// network to the result.
    pub fn fit_margin<E: Environment + ?Sized>(
        &mut self,
        env: &E,
        buffer: &TransitionBuffer,
        cfg: &TrainConfig,
        steps: usize,
        seed: u64,
    ) -> Result<()> {
        if buffer.is_empty() {
            return Err(Error::Empty("transition buffer"));
        }
        let n = env.state_dim();
        let batch = cfg.batch_size;
        let mut r = rng::seeded(seed);
        let mut inputs = vec![0.0; batch * n];
        let mut targets = vec![0.0; batch];
        let mut grad = vec![0.0; self.net.num_params()];
        for step in 0..steps {
            for b in 0..batch {
                let x = buffer.state(r.gen_range(0..buffer.len()));
                inputs[b * n..(b + 1) * n].copy_from_slice(x);
                targets[b] = env.margin(x);
            }
            let loss = self.net.loss_and_grad(&inputs, &targets, &mut grad, &mut self.ws);
            if !loss.is_finite() || loss > 1e6 {
                return Err(Error::Divergence { step, loss });
            }
            self.apply_update(cfg, &grad);
        }
        self.target = self.net.clone();
        Ok(())
    }

    pub fn finish(self) -> TrainedModel {
        TrainedModel {
            net: self.net,
            losses: self.losses,
        }
    }
}

/// Train `net` on a fixed buffer for `cfg.gradient_steps` steps.
pub fn train<E: Environment + ?Sized>(
    env: &E,
    buffer: &TransitionBuffer,
    cfg: &TrainConfig,
    net: Mlp,
) -> Result<TrainedModel> {
    cfg.validate()?;
    let mut trainer = Trainer::new(net);
    trainer.run(env, buffer, cfg, cfg.gradient_steps, cfg.seed)?;
    Ok(trainer.finish())
}

pub fn layer_sizes(state_dim: usize, hidden: &[usize]) -> Vec<usize> {
    let mut sizes = vec![state_dim];
    sizes.extend_from_slice(hidden);
    sizes.push(1);
    sizes
}

/// Full pipeline for one model: random initialisation, then `cfg.rounds`
/// rounds of data collection followed by training. The first round collects
/// with an optimistic value (pure nominal plus noise); later rounds switch on
/// the current network. A pure function of `(env, cfg, seed)`.
pub fn train_value<E: Environment + ?Sized>(env: &E, cfg: &TrainConfig, seed: u64) -> Result<TrainedModel> {
    cfg.validate()?;
    let sizes = layer_sizes(env.state_dim(), &cfg.hidden);
    let (center, scale) = env.state_scale();
    let mut init = rng::stream(seed, 0);
    let net = Mlp::random(&sizes, center, scale, &mut init)?;
    let mut trainer = Trainer::new(net);
    let mut buffer = TransitionBuffer::new(env.state_dim(), env.control_dim(), cfg.buffer_capacity)?;
    let per_round = cfg.gradient_steps / cfg.rounds;
    for round in 0..cfg.rounds {
        let collect_seed = rng::derive_seed(seed, 1000 + round as u64);
        if round == 0 {
            collect_transitions(
                env,
                &Constant(f64::INFINITY),
                cfg.episodes,
                cfg.exploration_noise,
                collect_seed,
                &mut buffer,
            )?;
        } else {
            collect_transitions(
                env,
                &trainer.net,
                cfg.episodes,
                cfg.exploration_noise,
                collect_seed,
                &mut buffer,
            )?;
        }
        if round == 0 && cfg.warm_start_steps > 0 {
            trainer.fit_margin(env, &buffer, cfg, cfg.warm_start_steps, rng::derive_seed(seed, 3000))?;
        }
        let steps = if round + 1 == cfg.rounds {
            cfg.gradient_steps - per_round * (cfg.rounds - 1)
        } else {
            per_round
        };
        trainer.run(env, &buffer, cfg, steps, rng::derive_seed(seed, 2000 + round as u64))?;
    }
    Ok(trainer.finish())
}

/// `members` models trained with seeds `base_seed + j`, `j = 0..members`.
pub fn train_ensemble<E: Environment + ?Sized>(
    env: &E,
    cfg: &TrainConfig,
    members: usize,
    base_seed: u64,
) -> Result<Vec<TrainedModel>> {
    if members == 0 {
        return Err(Error::Config("ensemble needs at least one member".into()));
    }
    (0..members)
        .map(|j| {
            train_value(env, cfg, base_seed.wrapping_add(j as u64)).map_err(|e| Error::Member {
                index: j,
                source: alloc::boxed::Box::new(e),
            })
        })
        .collect()
}
