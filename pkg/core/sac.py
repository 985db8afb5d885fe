"""
Soft Actor-Critic on plain numpy networks.

The actor outputs a mean and an unconstrained log-std head per action
dimension; the log-std is mapped smoothly into [LOG_STD_MIN, LOG_STD_MAX] and
actions are tanh-squashed Gaussians.  Two critics with Polyak-averaged targets
and a log-space entropy coefficient complete the learner.  ``train`` runs the
simulator stage, ``finetune`` continues a checkpoint on the stand-in platform
at the reduced learning rate.
"""

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from core.checkpoint import PolicyCheckpoint
from core.environment import ACTION_DIM, OBS_DIM, MagneticCapsuleEnv, clone_env
from core.networks import AdamOptimizer, MlpParams, backward, forward, polyak_update
from core.replay_buffer import Batch, ReplayBuffer
from utils.errors import TrainingDivergedError
from utils.events import (CHECKPOINTED, EPISODE_FINISHED, EVALUATED, TRAINING_FINISHED, TRAINING_STARTED,
                          EventEmitter)
from utils.seeding import derive_rng, derive_seed

logger = logging.getLogger(__name__)

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
LOG_2PI = float(np.log(2.0 * np.pi))
# tanh saturates to exactly +-1 in float64 for |u| > ~19
ACTION_BOUND = 1.0 - 1e-9


@dataclass(frozen=True)
class SacConfig:
    gamma: float = 0.92
    lr_sim: float = 1e-4
    lr_real: float = 5e-5
    batch_size: int = 360
    warmup_steps: int = 2000
    buffer_capacity: int = 185_000
    rho: float = 0.005
    target_entropy: float = -float(ACTION_DIM)
    updates_per_step: int = 1
    hidden_sizes: Tuple[int, ...] = (256, 256)
    initial_alpha: float = 0.2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    eval_interval: int = 5000
    eval_episodes: int = 5
    checkpoint_interval: int = 0
    finetune_warmup: int = 500
    retain_buffer: bool = False
    seed: int = 0
    obs_dim: int = OBS_DIM
    action_dim: int = ACTION_DIM

    def __post_init__(self):
        object.__setattr__(self, 'hidden_sizes', tuple(int(h) for h in self.hidden_sizes))
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if not 0.0 < self.rho < 1.0:
            raise ValueError(f"rho must lie in (0, 1), got {self.rho}")
        if self.lr_sim <= 0.0 or self.lr_real <= 0.0:
            raise ValueError("Learning rates must be positive")
        if self.batch_size < 1 or self.batch_size > self.buffer_capacity:
            raise ValueError(f"batch_size must lie in [1, buffer_capacity], got {self.batch_size}")
        if self.warmup_steps < 0 or self.finetune_warmup < 0:
            raise ValueError("Warm-up lengths must be nonnegative")
        if self.updates_per_step < 1:
            raise ValueError("updates_per_step must be at least 1")
        if not self.hidden_sizes or any(h < 1 for h in self.hidden_sizes):
            raise ValueError("hidden_sizes must be a nonempty list of positive widths")
        if self.initial_alpha <= 0.0:
            raise ValueError("initial_alpha must be positive")
        if self.eval_interval < 1 or self.eval_episodes < 1 or self.checkpoint_interval < 0:
            raise ValueError("Evaluation interval and episode count must be positive")

    def to_dict(self) -> Dict:
        data = asdict(self)
        data['hidden_sizes'] = list(self.hidden_sizes)
        return data

    def actor_sizes(self) -> List[int]:
        return [self.obs_dim, *self.hidden_sizes, 2 * self.action_dim]

    def critic_sizes(self) -> List[int]:
        return [self.obs_dim + self.action_dim, *self.hidden_sizes, 1]


def config_fingerprint(config: SacConfig) -> str:
    """SHA-256 over the fields that fix the network shapes and the action head."""
    shape = {
        'obs_dim': config.obs_dim,
        'action_dim': config.action_dim,
        'hidden_sizes': list(config.hidden_sizes),
        'activation': 'tanh',
        'log_std_bounds': [LOG_STD_MIN, LOG_STD_MAX],
    }
    return hashlib.sha256(json.dumps(shape, sort_keys=True).encode('utf-8')).hexdigest()


# -- squashed Gaussian policy ------------------------------------------------

def _log_std(raw: np.ndarray) -> np.ndarray:
    return LOG_STD_MIN + 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (np.tanh(raw) + 1.0)


def squash_correction(u: np.ndarray) -> np.ndarray:
    """log(1 - tanh(u)^2), evaluated without cancellation."""
    return 2.0 * (np.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))


def actor_distribution(actor: MlpParams, obs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Mean and log-std of the pre-squash Gaussian, each (N, action_dim)."""
    out, _ = forward(actor, obs)
    half = out.shape[1] // 2
    return out[:, :half], _log_std(out[:, half:])


def squashed_log_prob(u: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    """log pi(tanh(u)) summed over action dimensions."""
    z = (u - mean) / np.exp(log_std)
    gaussian = -0.5 * z ** 2 - log_std - 0.5 * LOG_2PI
    return np.sum(gaussian - squash_correction(u), axis=-1)


def squashed_log_density(action: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    """Log-density of an already squashed action."""
    u = np.arctanh(np.clip(action, -ACTION_BOUND, ACTION_BOUND))
    return squashed_log_prob(u, mean, log_std)


def actor_sample(actor: MlpParams, obs: np.ndarray, rng: Optional[np.random.Generator] = None,
                 deterministic: bool = False, noise: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Sample squashed actions and their log-probabilities.

    Args:
        actor: Policy network.
        obs: One observation (obs_dim,) or a batch (N, obs_dim).
        rng: Source of the Gaussian noise when ``noise`` is not given.
        deterministic: Return tanh(mean) instead of a sample.
        noise: Standard-normal draws to use instead of ``rng``.

    Returns:
        (action, log_prob) with the leading batch axis dropped for a single observation.
    """
    obs = np.asarray(obs, dtype=float)
    single = obs.ndim == 1
    mean, log_std = actor_distribution(actor, np.atleast_2d(obs))
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(log_std))):
        raise TrainingDivergedError("Actor produced a non-finite output")

    if deterministic:
        u = mean
    else:
        if noise is None:
            if rng is None:
                raise ValueError("Stochastic sampling needs an rng or explicit noise")
            noise = rng.standard_normal(mean.shape)
        u = mean + np.exp(log_std) * np.asarray(noise, dtype=float).reshape(mean.shape)

    action = np.clip(np.tanh(u), -ACTION_BOUND, ACTION_BOUND)
    log_prob = squashed_log_prob(u, mean, log_std)
    if single:
        return action[0], log_prob[0]
    return action, log_prob


# -- losses and gradients ----------------------------------------------------

def critic_value(critic: MlpParams, obs: np.ndarray, actions: np.ndarray):
    out, cache = forward(critic, np.concatenate([np.atleast_2d(obs), np.atleast_2d(actions)], axis=1))
    return out[:, 0], cache


def critic_loss_and_grads(critic: MlpParams, obs: np.ndarray, actions: np.ndarray,
                          targets: np.ndarray) -> Tuple[float, List[np.ndarray]]:
    """Mean-squared Bellman error and its gradient; ``targets`` are treated as constants."""
    q, cache = critic_value(critic, obs, actions)
    diff = q - np.asarray(targets, dtype=float)
    loss = float(np.mean(diff ** 2))
    grads, _ = backward(critic, cache, (2.0 / diff.shape[0] * diff)[:, None])
    return loss, grads


def actor_loss_and_grads(actor: MlpParams, critic1: MlpParams, critic2: MlpParams, obs: np.ndarray,
                         alpha: float, noise: np.ndarray) -> Tuple[float, List[np.ndarray], np.ndarray]:
    """
    Reparameterized objective mean(alpha * log pi(a|s) - min_j Q_j(s, a)).

    Gradients flow through the sampled action into both the mean and the
    log-std head; critic parameters receive none.

    Returns:
        (loss, actor gradients in tensors() order, per-sample log-probabilities)
    """
    obs = np.atleast_2d(np.asarray(obs, dtype=float))
    noise = np.atleast_2d(np.asarray(noise, dtype=float))
    n, action_dim = noise.shape

    out, cache = forward(actor, obs)
    mean, raw = out[:, :action_dim], out[:, action_dim:]
    squashed_raw = np.tanh(raw)
    log_std = LOG_STD_MIN + 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (squashed_raw + 1.0)
    std = np.exp(log_std)
    u = mean + std * noise
    action = np.tanh(u)
    log_prob = np.sum(-0.5 * noise ** 2 - log_std - 0.5 * LOG_2PI - squash_correction(u), axis=1)

    critic_input = np.concatenate([obs, action], axis=1)
    q1, cache1 = forward(critic1, critic_input)
    q2, cache2 = forward(critic2, critic_input)
    q1, q2 = q1[:, 0], q2[:, 0]
    use_first = q1 <= q2
    q_min = np.where(use_first, q1, q2)
    loss = float(np.mean(alpha * log_prob - q_min))

    _, d_in1 = backward(critic1, cache1, np.where(use_first, -1.0 / n, 0.0)[:, None])
    _, d_in2 = backward(critic2, cache2, np.where(use_first, 0.0, -1.0 / n)[:, None])
    d_action = (d_in1 + d_in2)[:, obs.shape[1]:]

    d_log_prob = alpha / n
    # d log pi / du = 2 tanh(u) for fixed noise
    d_u = d_log_prob * 2.0 * action + d_action * (1.0 - action ** 2)
    d_log_std = -d_log_prob + d_u * std * noise
    d_raw = d_log_std * 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (1.0 - squashed_raw ** 2)
    grads, _ = backward(actor, cache, np.concatenate([d_u, d_raw], axis=1))
    return loss, grads, log_prob


def alpha_gradient(log_probs: np.ndarray, target_entropy: float) -> float:
    """d/d(log alpha) of -log_alpha * mean(log pi + target_entropy)."""
    return -float(np.mean(np.asarray(log_probs, dtype=float) + target_entropy))


# -- update steps ------------------------------------------------------------

@dataclass
class SacNetworks:
    actor: MlpParams
    critic1: MlpParams
    critic2: MlpParams
    target1: MlpParams
    target2: MlpParams
    log_alpha: float

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha))

    @classmethod
    def init(cls, config: SacConfig, rng: np.random.Generator) -> 'SacNetworks':
        actor = MlpParams.init(config.actor_sizes(), rng, output_scale=0.01)
        critic1 = MlpParams.init(config.critic_sizes(), rng)
        critic2 = MlpParams.init(config.critic_sizes(), rng)
        return cls(actor, critic1, critic2, critic1.copy(), critic2.copy(), float(np.log(config.initial_alpha)))

    def copy(self) -> 'SacNetworks':
        return SacNetworks(self.actor.copy(), self.critic1.copy(), self.critic2.copy(),
                           self.target1.copy(), self.target2.copy(), self.log_alpha)

    def is_finite(self) -> bool:
        return (all(net.is_finite() for net in (self.actor, self.critic1, self.critic2, self.target1, self.target2))
                and bool(np.isfinite(self.log_alpha)))


@dataclass
class SacOptimizers:
    actor: AdamOptimizer
    critic1: AdamOptimizer
    critic2: AdamOptimizer
    alpha: AdamOptimizer

    @classmethod
    def init(cls, networks: SacNetworks, config: SacConfig, lr: float) -> 'SacOptimizers':
        def make(tensors):
            return AdamOptimizer.for_tensors(tensors, lr, config.adam_beta1, config.adam_beta2, config.adam_eps)
        return cls(make(networks.actor.tensors()), make(networks.critic1.tensors()),
                   make(networks.critic2.tensors()), make([np.zeros(1)]))

    def as_dict(self) -> Dict[str, AdamOptimizer]:
        return {'actor': self.actor, 'critic1': self.critic1, 'critic2': self.critic2, 'alpha': self.alpha}

    def set_learning_rate(self, lr: float) -> None:
        for optimizer in self.as_dict().values():
            optimizer.lr = lr


def critic_target(batch: Batch, networks: SacNetworks, gamma: float, rng: Optional[np.random.Generator] = None,
                  noise: Optional[np.ndarray] = None) -> np.ndarray:
    """y = r + gamma (1 - done) (min_j Qbar_j(s', a') - alpha log pi(a'|s')) with a' ~ pi(.|s')."""
    next_action, next_log_prob = actor_sample(networks.actor, batch.next_obs, rng, noise=noise)
    q1, _ = critic_value(networks.target1, batch.next_obs, next_action)
    q2, _ = critic_value(networks.target2, batch.next_obs, next_action)
    soft_value = np.minimum(q1, q2) - networks.alpha * next_log_prob
    return batch.rewards + gamma * (1.0 - batch.dones) * soft_value


def update_critics(batch: Batch, networks: SacNetworks, targets: np.ndarray, optimizers: SacOptimizers,
                   lr: Optional[float] = None, step: Optional[int] = None) -> float:
    """One Adam step per critic on the MSE to fixed targets; returns the mean of both losses."""
    losses = []
    for critic, optimizer in ((networks.critic1, optimizers.critic1), (networks.critic2, optimizers.critic2)):
        loss, grads = critic_loss_and_grads(critic, batch.obs, batch.actions, targets)
        if not np.isfinite(loss):
            raise TrainingDivergedError("Critic loss is not finite", step)
        if lr is not None:
            optimizer.lr = lr
        optimizer.step(critic.tensors(), grads)
        losses.append(loss)
    return float(np.mean(losses))


def update_actor(obs: np.ndarray, networks: SacNetworks, optimizer: AdamOptimizer, alpha: float,
                 rng: Optional[np.random.Generator] = None, noise: Optional[np.ndarray] = None,
                 lr: Optional[float] = None, step: Optional[int] = None) -> Tuple[float, np.ndarray]:
    """One Adam step on the actor with the critics held fixed; returns (loss, log-probs)."""
    obs = np.atleast_2d(obs)
    if noise is None:
        noise = rng.standard_normal((obs.shape[0], networks.actor.sizes[-1] // 2))
    loss, grads, log_probs = actor_loss_and_grads(networks.actor, networks.critic1, networks.critic2,
                                                  obs, alpha, noise)
    if not np.isfinite(loss):
        raise TrainingDivergedError("Actor loss is not finite", step)
    if lr is not None:
        optimizer.lr = lr
    optimizer.step(networks.actor.tensors(), grads)
    return loss, log_probs


def adjust_log_alpha(log_alpha: float, log_probs: np.ndarray, target_entropy: float,
                     optimizer: AdamOptimizer) -> float:
    parameter = np.array([log_alpha], dtype=float)
    optimizer.step([parameter], [np.array([alpha_gradient(log_probs, target_entropy)])])
    return float(parameter[0])


def adjust_alpha(alpha: float, log_probs: np.ndarray, target_entropy: float, lr: float,
                 optimizer: Optional[AdamOptimizer] = None) -> float:
    """
    Dual step on the entropy coefficient, taken in log space so alpha stays positive.

    Entropy below the target (mean log pi > -target_entropy) raises alpha.
    """
    if alpha <= 0.0:
        raise ValueError("alpha must be positive")
    optimizer = optimizer or AdamOptimizer.for_tensors([np.zeros(1)], lr)
    optimizer.lr = lr
    return float(np.exp(adjust_log_alpha(float(np.log(alpha)), log_probs, target_entropy, optimizer)))


# -- agent -------------------------------------------------------------------

class SacAgent:
    """Networks, optimizers and the per-batch update of one learner."""

    def __init__(self, config: SacConfig, networks: SacNetworks, optimizers: SacOptimizers):
        self.config = config
        self.networks = networks
        self.optimizers = optimizers
        self.logger = logging.getLogger(__name__)

    @classmethod
    def create(cls, config: SacConfig, lr: Optional[float] = None) -> 'SacAgent':
        networks = SacNetworks.init(config, derive_rng(config.seed, 'init'))
        return cls(config, networks, SacOptimizers.init(networks, config, lr or config.lr_sim))

    @classmethod
    def from_checkpoint(cls, checkpoint: PolicyCheckpoint, config: SacConfig) -> 'SacAgent':
        checkpoint.require_fingerprint(config_fingerprint(config))
        networks = SacNetworks(checkpoint.actor.copy(), checkpoint.critic1.copy(), checkpoint.critic2.copy(),
                               checkpoint.target1.copy(), checkpoint.target2.copy(), checkpoint.log_alpha)

        def clone(optimizer: AdamOptimizer) -> AdamOptimizer:
            return AdamOptimizer(optimizer.lr, optimizer.beta1, optimizer.beta2, optimizer.eps, optimizer.t,
                                 [m.copy() for m in optimizer.m], [v.copy() for v in optimizer.v])

        saved = checkpoint.optimizers
        optimizers = SacOptimizers(clone(saved['actor']), clone(saved['critic1']), clone(saved['critic2']),
                                   clone(saved['alpha']))
        return cls(config, networks, optimizers)

    def to_checkpoint(self, step: int) -> PolicyCheckpoint:
        nets = self.networks.copy()
        optimizers = {name: AdamOptimizer(opt.lr, opt.beta1, opt.beta2, opt.eps, opt.t,
                                          [m.copy() for m in opt.m], [v.copy() for v in opt.v])
                      for name, opt in self.optimizers.as_dict().items()}
        return PolicyCheckpoint(nets.actor, nets.critic1, nets.critic2, nets.target1, nets.target2,
                                nets.log_alpha, optimizers, config_fingerprint(self.config), int(step),
                                self.config.to_dict())

    @property
    def alpha(self) -> float:
        return self.networks.alpha

    def act(self, obs: np.ndarray, rng: Optional[np.random.Generator] = None, deterministic: bool = False) -> np.ndarray:
        action, _ = actor_sample(self.networks.actor, obs, rng, deterministic=deterministic)
        return action

    def update(self, batch: Batch, rng: np.random.Generator, step: Optional[int] = None) -> Dict[str, float]:
        """Critics, then actor against the refreshed critics, then alpha, then the targets."""
        nets = self.networks
        targets = critic_target(batch, nets, self.config.gamma, rng)
        critic_loss = update_critics(batch, nets, targets, self.optimizers, step=step)
        actor_loss, log_probs = update_actor(batch.obs, nets, self.optimizers.actor, nets.alpha, rng, step=step)
        nets.log_alpha = adjust_log_alpha(nets.log_alpha, log_probs, self.config.target_entropy,
                                          self.optimizers.alpha)
        nets.target1 = polyak_update(nets.target1, nets.critic1, self.config.rho)
        nets.target2 = polyak_update(nets.target2, nets.critic2, self.config.rho)
        if not nets.is_finite():
            self.logger.error(f"Non-finite parameters after update at step {step}")
            raise TrainingDivergedError("Network parameters became non-finite", step)
        return {'critic_loss': critic_loss, 'actor_loss': actor_loss, 'alpha': nets.alpha,
                'entropy': -float(np.mean(log_probs))}

    def parameter_hash(self) -> str:
        digest = hashlib.sha256()
        for net in (self.networks.actor, self.networks.critic1, self.networks.critic2,
                    self.networks.target1, self.networks.target2):
            for tensor in net.tensors():
                digest.update(np.ascontiguousarray(tensor, dtype='<f8').tobytes())
        digest.update(np.float64(self.networks.log_alpha).tobytes())
        return digest.hexdigest()


def evaluate_policy(agent: SacAgent, env: MagneticCapsuleEnv, episodes: int, seed: int) -> float:
    """Mean undiscounted return of the deterministic policy on a private clone of ``env``."""
    eval_env = clone_env(env)
    returns = []
    for episode in range(episodes):
        obs = eval_env.reset(seed=derive_seed(seed, 'eval', episode))
        total, done = 0.0, False
        while not done:
            action = agent.act(eval_env.observation_vector(obs), deterministic=True)
            obs, reward, done, _ = eval_env.step(action)
            total += reward
        returns.append(total)
    return float(np.mean(returns))


# -- training loops ----------------------------------------------------------

@dataclass
class TrainingResult:
    checkpoint: PolicyCheckpoint
    curve: List[Dict[str, float]] = field(default_factory=list)
    buffer: Optional[ReplayBuffer] = None
    updates: int = 0
    episodes: int = 0


class SacTrainer(EventEmitter):
    """
    Environment loop shared by the simulator stage and fine-tuning.

    Emits TRAINING_STARTED, EPISODE_FINISHED, EVALUATED, CHECKPOINTED and
    TRAINING_FINISHED so services can persist artifacts as they appear.
    """

    def __init__(self, env: MagneticCapsuleEnv, config: SacConfig, agent: SacAgent, buffer: ReplayBuffer,
                 stage: str = 'sim', start_step: int = 0):
        super().__init__()
        self.env = env
        self.config = config
        self.agent = agent
        self.buffer = buffer
        self.stage = stage
        self.start_step = start_step
        self.logger = logging.getLogger(__name__)

    def run(self, total_steps: int, warmup: int, random_warmup: bool, lr: float) -> TrainingResult:
        """
        Collect ``total_steps`` transitions, updating once warm-up is over.

        During the first ``warmup`` steps actions are uniform random when
        ``random_warmup`` is set, otherwise they come from the policy; no
        gradient step is taken until the warm-up is over and the buffer holds
        at least one batch.
        """
        config = self.config
        self.agent.optimizers.set_learning_rate(lr)
        action_rng = derive_rng(config.seed, self.stage, 'actions')
        update_rng = derive_rng(config.seed, self.stage, 'updates')
        eval_seed = derive_seed(config.seed, self.stage, 'evaluation')

        self.emit(TRAINING_STARTED, {'stage': self.stage, 'total_steps': total_steps, 'warmup': warmup})
        self.logger.info(f"[{self.stage}] training for {total_steps} steps (warm-up {warmup}, lr {lr:g})")

        curve: List[Dict[str, float]] = []
        window: List[Dict[str, float]] = []
        updates = 0
        episodes = 0
        episode_return = 0.0
        obs_vec = self.env.observation_vector(self.env.reset(seed=derive_seed(config.seed, self.stage, 'episode', 0)))
        step = self.start_step

        for t in range(total_steps):
            step = self.start_step + t + 1
            if t < warmup and random_warmup:
                action = action_rng.uniform(-1.0, 1.0, config.action_dim)
            else:
                action = self.agent.act(obs_vec, rng=action_rng)

            obs, reward, done, info = self.env.step(action)
            next_vec = self.env.observation_vector(obs)
            # truncations (time limit, leaving the workspace) still bootstrap
            self.buffer.add(obs_vec, action, reward, next_vec, info['terminal'])
            episode_return += reward

            if done:
                episodes += 1
                self.emit(EPISODE_FINISHED, {'step': step, 'return': episode_return, 'success': info['success']})
                self.logger.debug(f"[{self.stage}] episode {episodes} return {episode_return:.3f}")
                episode_return = 0.0
                obs = self.env.reset(seed=derive_seed(config.seed, self.stage, 'episode', episodes))
                next_vec = self.env.observation_vector(obs)
            obs_vec = next_vec

            if t >= warmup and len(self.buffer) >= config.batch_size:
                for _ in range(config.updates_per_step):
                    batch = self.buffer.sample(config.batch_size, update_rng)
                    window.append(self.agent.update(batch, update_rng, step))
                    updates += 1

            if step % config.eval_interval == 0:
                curve.append(self._evaluate(step, window, eval_seed))
                window = []
            if config.checkpoint_interval and step % config.checkpoint_interval == 0:
                self.emit(CHECKPOINTED, {'step': step, 'checkpoint': self.agent.to_checkpoint(step)})

        if not curve or curve[-1]['step'] != step:
            curve.append(self._evaluate(step, window, eval_seed))

        result = TrainingResult(self.agent.to_checkpoint(step), curve, self.buffer, updates, episodes)
        self.emit(TRAINING_FINISHED, {'stage': self.stage, 'step': step, 'updates': updates})
        return result

    def _evaluate(self, step: int, window: Sequence[Dict[str, float]], eval_seed: int) -> Dict[str, float]:
        eval_return = evaluate_policy(self.agent, self.env, self.config.eval_episodes, eval_seed)
        row = {
            'step': int(step),
            'eval_return': eval_return,
            'alpha': self.agent.alpha,
            'critic_loss': float(np.mean([w['critic_loss'] for w in window])) if window else float('nan'),
            'actor_loss': float(np.mean([w['actor_loss'] for w in window])) if window else float('nan'),
        }
        self.logger.info(f"[{self.stage}] step {step}: eval_return {eval_return:.3f}, alpha {row['alpha']:.4f}, "
                         f"critic_loss {row['critic_loss']:.4g}, actor_loss {row['actor_loss']:.4g}")
        self.emit(EVALUATED, row)
        return row


def _attach(trainer: SacTrainer, listeners: Optional[Dict[str, Callable]]) -> None:
    for event_name, callback in (listeners or {}).items():
        trainer.on(event_name, callback)


def train(env: MagneticCapsuleEnv, config: SacConfig, total_steps: int,
          listeners: Optional[Dict[str, Callable]] = None) -> TrainingResult:
    """Simulator stage: fresh networks, random warm-up, then SAC at ``lr_sim``."""
    if total_steps < 0:
        raise ValueError("total_steps must be nonnegative")
    warmup = config.warmup_steps
    if total_steps < warmup:
        logger.warning(f"total_steps {total_steps} is shorter than the warm-up {warmup}; no updates will run")
        warmup = total_steps
    agent = SacAgent.create(config, config.lr_sim)
    buffer = ReplayBuffer(config.buffer_capacity, config.obs_dim, config.action_dim)
    trainer = SacTrainer(env, config, agent, buffer, stage='sim')
    _attach(trainer, listeners)
    return trainer.run(total_steps, warmup, random_warmup=True, lr=config.lr_sim)


def finetune(checkpoint: PolicyCheckpoint, real_env: MagneticCapsuleEnv, config: SacConfig, steps: int,
             buffer: Optional[ReplayBuffer] = None,
             listeners: Optional[Dict[str, Callable]] = None) -> TrainingResult:
    """
    Continue a checkpoint on the stand-in platform at ``lr_real``.

    Both critics and the actor keep learning. The buffer starts empty unless
    ``config.retain_buffer`` is set and one is passed in; the first
    ``finetune_warmup`` steps only collect policy transitions.
    """
    checkpoint.require_fingerprint(config_fingerprint(config))
    if steps == 0:
        return TrainingResult(checkpoint, [], buffer, 0, 0)
    if steps < 0:
        raise ValueError("steps must be nonnegative")

    agent = SacAgent.from_checkpoint(checkpoint, config)
    if config.retain_buffer and buffer is not None:
        logger.info(f"Fine-tuning with the retained buffer ({len(buffer)} transitions)")
    else:
        if config.retain_buffer:
            logger.warning("retain_buffer is set but no buffer was supplied; starting empty")
        buffer = ReplayBuffer(config.buffer_capacity, config.obs_dim, config.action_dim)

    trainer = SacTrainer(real_env, config, agent, buffer, stage='finetune', start_step=checkpoint.step)
    _attach(trainer, listeners)
    return trainer.run(steps, min(config.finetune_warmup, steps), random_warmup=False, lr=config.lr_real)
