"""Instruction-following agent: proxy-task pre-training and mixed-environment fine-tuning."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import NumericError, Tensor
from .conditioning import MASK, SCENES, TextEncoder, Vocabulary, default_vocabulary
from .nn import Module, glorot
from .pano import N_VIEWS, view_index
from .world import STOP, Episode, MixPolicy, Observation, World, WorldGraph, mix_environment, oracle_action

MAX_TOKENS = 64


class AgentModel(Module):
    """View encoder, instruction state, bilinear action scorer and the two proxy heads."""

    def __init__(
        self,
        vocab: Vocabulary | None = None,
        view_dim: int = 192,
        d: int = 32,
        hidden: int = 32,
        n_classes: int = len(SCENES),
        seed: int = 0,
    ):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.vocab = vocab or default_vocabulary()
        self.view_dim, self.d, self.hidden, self.n_classes = view_dim, d, hidden, n_classes
        self.text = TextEncoder(self.vocab, dim=d, cond_dim=None, seed=seed + 1)
        self.add_param("feat1.W", glorot(rng, hidden, view_dim))
        self.add_param("feat1.b", np.zeros(hidden))
        self.add_param("feat2.W", glorot(rng, d, hidden))
        self.add_param("feat2.b", np.zeros(d))
        self.add_param("stop", rng.normal(0.0, 0.1, size=(1, d)))
        self.add_param("visited", rng.normal(0.0, 0.1, size=(1, d)))
        self.add_param("state.W", glorot(rng, d, 4 * d))
        self.add_param("state.b", np.zeros(d))
        self.add_param("score.M", glorot(rng, d, d))
        self.add_param("pos", rng.normal(0.0, 0.1, size=(MAX_TOKENS, d)))
        self.add_param("mlm_ctx.W", glorot(rng, d, 3 * d))
        self.add_param("mlm_ctx.b", np.zeros(d))
        self.add_param("mlm_head.W", glorot(rng, len(self.vocab), d))
        self.add_param("mlm_head.b", np.zeros(len(self.vocab)))
        self.add_param("vpos", rng.normal(0.0, 0.1, size=(N_VIEWS, d)))
        self.add_param("mrm_ctx.W", glorot(rng, d, 2 * d))
        self.add_param("mrm_ctx.b", np.zeros(d))
        self.add_param("mrm_head.W", glorot(rng, n_classes, d))
        self.add_param("mrm_head.b", np.zeros(n_classes))

    def config(self) -> dict[str, int]:
        return {"view_dim": self.view_dim, "d": self.d, "hidden": self.hidden, "n_classes": self.n_classes}

    def parameters(self) -> list[Tensor]:
        return self.trainable() + self.text.trainable()

    def state(self) -> dict[str, np.ndarray]:
        out = {f"agent.{k}": v for k, v in self.state_dict().items()}
        out.update({f"text.{k}": v for k, v in self.text.state_dict().items()})
        out.update({f"config.{k}": np.array([float(v)]) for k, v in self.config().items()})
        return out

    # -- encoders ---------------------------------------------------------

    def view_features(self, pixels: np.ndarray) -> Tensor:
        """``(n, view_dim)`` flattened sub-views -> ``(n, d)`` features."""
        x = ad.tensor(np.asarray(pixels, dtype=np.float64).reshape(len(pixels), -1) - 0.5)
        h = ad.gelu(self.dense("feat1.W", x, "feat1.b"))
        return self.dense("feat2.W", h, "feat2.b")

    def instruction(self, tokens: Sequence[str]) -> tuple[Tensor, Tensor]:
        """Pooled instruction embedding and the embedding of its final token (the goal word)."""
        if not tokens:
            raise ValueError("empty instruction")
        pooled = self.text.pooled([list(tokens)])
        goal = ad.take(self.text.params["embed"], self.vocab.ids([tokens[-1]]))
        return pooled, goal

    # -- action scoring ---------------------------------------------------

    def step_logits(
        self, instr: tuple[Tensor, Tensor], feats: Tensor, candidates: Sequence[tuple[int, int]], visited: Sequence[bool], hist: Tensor | None
    ) -> Tensor:
        """Logits over ``candidates`` (node, heading) followed by STOP.

        ``feats`` are the current node's 36 view features.
        """
        d = self.d
        cur = ad.matmul(ad.tensor(np.full((1, N_VIEWS), 1.0 / N_VIEWS)), feats)
        hist = hist if hist is not None else ad.tensor(np.zeros((1, d)))
        s = ad.tanh(self.dense("state.W", ad.concat([instr[0], instr[1], cur, hist], axis=1), "state.b"))
        rows = [ad.add(cur, self.params["stop"])]
        if candidates:
            cand = ad.take(feats, [view_index(h, 1) for _, h in candidates])
            flags = ad.tensor(np.asarray(visited, dtype=np.float64).reshape(-1, 1))
            cand = ad.add(cand, ad.matmul(flags, self.params["visited"]))
            rows.insert(0, cand)
        options = ad.concat(rows, axis=0)
        logits = ad.matmul(ad.matmul(s, self.params["score.M"]), ad.transpose(options))
        return ad.reshape(logits, (len(candidates) + 1,))

    def action_scores(self, graph: WorldGraph, episode: Episode, path: Sequence[int], observe) -> tuple[list[int], np.ndarray]:
        with ad.no_grad():
            ids, logits = _Trajectory(self, graph, episode, observe).logits(path)
        return ids, logits.data


class Policy(Protocol):
    def action_scores(self, graph: WorldGraph, episode: Episode, path: Sequence[int], observe: Callable[[int], Observation]) -> tuple[list[int], np.ndarray]:
        ...


def candidate_actions(graph: WorldGraph, node: int) -> list[tuple[int, int]]:
    """(neighbour, heading) pairs sorted by neighbour id; STOP is appended by the scorer."""
    heads = graph.neighbor_headings(node)
    return [(nb, heads[nb]) for nb in graph.neighbors(node)]


class _Trajectory:
    """Feature cache and per-step logits for one episode under one observation lookup."""

    def __init__(self, model: AgentModel, graph: WorldGraph, episode: Episode, observe: Callable[[int], Observation]):
        self.model, self.graph, self.episode, self.observe = model, graph, episode, observe
        self.instr = model.instruction(episode.instruction)
        self._feats: dict[int, Tensor] = {}

    def feats(self, node: int) -> Tensor:
        f = self._feats.get(node)
        if f is None:
            obs = self.observe(node)
            f = self.model.view_features(obs.pixels().reshape(N_VIEWS, -1))
            self._feats[node] = f
        return f

    def logits(self, path: Sequence[int]) -> tuple[list[int], Tensor]:
        node = path[-1]
        cands = candidate_actions(self.graph, node)
        seen = set(path[:-1])
        hist = None
        if len(path) > 1:
            prev = ad.concat([self.feats(n) for n in path[:-1]], axis=0)
            hist = ad.matmul(ad.tensor(np.full((1, prev.shape[0]), 1.0 / prev.shape[0])), prev)
        logits = self.model.step_logits(self.instr, self.feats(node), cands, [nb in seen for nb, _ in cands], hist)
        return [nb for nb, _ in cands] + [STOP], logits


def action_loss(logits: Tensor, candidates: Sequence[int], expert: int) -> Tensor:
    """``-log softmax(logits)[expert]``; zero when the expert is the only candidate."""
    if expert not in candidates:
        raise ValueError(f"expert action {expert} is not a candidate")
    logp = ad.log_softmax(logits, axis=0)
    return ad.neg(ad.sum(ad.take(logp, [list(candidates).index(expert)])))


def _lookup(world: World, overrides: Mapping[int, Observation] | None = None) -> Callable[[int], Observation]:
    cache: dict[int, Observation] = dict(overrides or {})

    def observe(node: int) -> Observation:
        obs = cache.get(node)
        if obs is None:
            obs = world.observe(node)
            cache[node] = obs
        return obs

    return observe


# ---------------------------------------------------------------------------
# proxy losses


def mlm_positions(length: int, rng: np.random.Generator) -> np.ndarray:
    if length < 1:
        raise ValueError("empty instruction")
    k = max(1, int(math.floor(0.15 * length + 0.5)))
    return np.sort(rng.choice(length, size=k, replace=False))


def mlm_loss(model: AgentModel, episode: Episode, rng: np.random.Generator, observe: Callable[[int], Observation], positions=None) -> Tensor:
    """Masked-token cross-entropy from the masked instruction and the path's mean view feature."""
    toks = list(episode.instruction)
    if not toks:
        raise ValueError("empty instruction")
    if len(toks) > MAX_TOKENS:
        raise ValueError(f"instruction longer than {MAX_TOKENS} tokens")
    pos = mlm_positions(len(toks), rng) if positions is None else np.asarray(positions)
    masked = [MASK if i in set(pos.tolist()) else t for i, t in enumerate(toks)]
    targets = model.vocab.ids([toks[i] for i in pos])
    k = len(pos)
    ctx = model.text.pooled([masked])
    pix = np.concatenate([observe(n).pixels().reshape(N_VIEWS, -1) for n in episode.path])
    traj = ad.mean(model.view_features(pix), axis=0, keepdims=True)
    ones = ad.tensor(np.ones((k, 1)))
    feats = ad.concat([ad.matmul(ones, ctx), ad.take(model.params["pos"], pos), ad.matmul(ones, traj)], axis=1)
    h = ad.gelu(model.dense("mlm_ctx.W", feats, "mlm_ctx.b"))
    logits = model.dense("mlm_head.W", h, "mlm_head.b")
    return ad.softmax_cross_entropy(logits, targets)


def scene_targets(graph: WorldGraph, node: int, n_classes: int = len(SCENES)) -> np.ndarray:
    """One-hot scene class per sub-view, shape ``(36, C)``."""
    out = np.zeros((N_VIEWS, n_classes))
    for i, s in enumerate(graph.view_scenes(node)):
        out[i, SCENES.index(s)] = 1.0
    return out


def mrm_loss(model: AgentModel, observation: Observation, target_probs, rng: np.random.Generator, view: int | None = None) -> Tensor:
    """Zero one view's feature and match the predicted class distribution to its target by KL."""
    target = np.asarray(target_probs, dtype=np.float64)
    if target.shape != (N_VIEWS, model.n_classes):
        raise ValueError(f"target must be (36, {model.n_classes})")
    if np.any(target < 0) or np.any(np.abs(target.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("target rows must be probability distributions")
    j = int(rng.integers(0, N_VIEWS)) if view is None else int(view)
    feats = model.view_features(observation.pixels().reshape(N_VIEWS, -1))
    keep = np.ones((N_VIEWS, model.d))
    keep[j] = 0.0
    pooled = ad.mean(ad.mul(feats, ad.tensor(keep)), axis=0, keepdims=True)
    h = ad.tanh(model.dense("mrm_ctx.W", ad.concat([pooled, ad.take(model.params["vpos"], [j])], axis=1), "mrm_ctx.b"))
    logq = ad.log_softmax(model.dense("mrm_head.W", h, "mrm_head.b"), axis=1)
    return ad.kl_divergence(target[j : j + 1], logq)


def sap_loss(model: AgentModel, graph: WorldGraph, episode: Episode, observe: Callable[[int], Observation]) -> Tensor:
    """Teacher-forced action cross-entropy summed over the expert path (STOP at the end)."""
    traj = _Trajectory(model, graph, episode, observe)
    path = list(episode.path)
    total = None
    for t in range(len(path)):
        expert = path[t + 1] if t + 1 < len(path) else STOP
        ids, logits = traj.logits(path[: t + 1])
        step = action_loss(logits, ids, expert)
        total = step if total is None else ad.add(total, step)
    return total


def pid_loss(
    model: AgentModel,
    graph: WorldGraph,
    episode: Episode,
    observe: Callable[[int], Observation],
    max_steps: int = 15,
    temperature: float = 0.0,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, list[int]]:
    """Roll out the current policy, then score its own visited states against oracle actions."""
    path = rollout_path(model, graph, episode, observe, max_steps, temperature, rng)
    traj = _Trajectory(model, graph, episode, observe)
    total = None
    for t in range(len(path)):
        target = oracle_action(graph, path[t], episode.goal)
        ids, logits = traj.logits(path[: t + 1])
        step = action_loss(logits, ids, target)
        total = step if total is None else ad.add(total, step)
    return total, path


# ---------------------------------------------------------------------------
# rollout


def choose(ids: Sequence[int], logits: np.ndarray, temperature: float = 0.0, rng: np.random.Generator | None = None) -> int:
    if temperature > 0:
        if rng is None:
            raise ValueError("stochastic choice needs an rng")
        z = (logits - logits.max()) / temperature
        p = np.exp(z) / np.exp(z).sum()
        return ids[int(rng.choice(len(ids), p=p))]
    return ids[int(np.argmax(logits))]


def rollout_path(
    policy,
    graph: WorldGraph,
    episode: Episode,
    observe: Callable[[int], Observation],
    max_steps: int = 15,
    temperature: float = 0.0,
    rng: np.random.Generator | None = None,
) -> list[int]:
    path = [episode.start]
    while len(path) <= max_steps:
        ids, logits = policy.action_scores(graph, episode, path, observe)
        a = choose(ids, np.asarray(logits, dtype=np.float64), temperature, rng)
        if a == STOP:
            break
        path.append(a)
    return path


def rollout(policy, world: World, episode: Episode, max_steps: int = 15) -> list[int]:
    """Greedy path: argmax over candidates (smallest node id first on ties), until STOP or ``max_steps``."""
    if episode.start not in world.graph:
        raise ValueError(f"start node {episode.start} not in world")
    return rollout_path(policy, world.graph, episode, _lookup(world), max_steps)


class OraclePolicy:
    """Scores the oracle action 1 and everything else 0."""

    def action_scores(self, graph, episode, path, observe):
        ids = graph.neighbors(path[-1]) + [STOP]
        best = oracle_action(graph, path[-1], episode.goal)
        return ids, np.array([1.0 if i == best else 0.0 for i in ids])


class StationaryPolicy:
    """Always stops immediately."""

    def action_scores(self, graph, episode, path, observe):
        ids = graph.neighbors(path[-1]) + [STOP]
        return ids, np.array([0.0] * (len(ids) - 1) + [1.0])


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    lambda_mlm: float = 1.0
    lambda_mrm: float = 1.0
    lambda_sap: float = 1.0
    lambda_ft: float = 0.2
    lr_pt: float = 1e-3
    lr_ft: float = 5e-4
    iters_pt: int = 2000
    iters_ft: int = 500
    mix: MixPolicy = field(default_factory=MixPolicy)
    max_steps: int = 15
    temperature: float = 0.0

    def __post_init__(self):
        for name in ("lambda_mlm", "lambda_mrm", "lambda_sap", "lambda_ft", "lr_pt", "lr_ft"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.iters_pt < 0 or self.iters_ft < 0:
            raise ValueError("iteration counts must be >= 0")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")


@dataclass
class TraceEntry:
    iter: int
    loss: float
    parts: dict[str, float]

    def to_json(self) -> str:
        return json.dumps({"iter": self.iter, "loss": self.loss, "parts": self.parts})


def write_trace(path: str | os.PathLike, trace: Sequence[TraceEntry]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for e in trace:
            f.write(e.to_json() + "\n")


def pretrain_loss(model: AgentModel, world: World, episode: Episode, cfg: TrainConfig, rng: np.random.Generator, generated: Mapping[int, Observation] | None = None):
    """``l1*MLM + l2*MRM + l3*SAP`` for one episode; each term draws from its own child stream."""
    r_mlm, r_mrm = rng.spawn(2)
    observe = _lookup(world, generated)
    node = episode.path[int(r_mrm.integers(0, len(episode.path)))]
    parts = {
        "mlm": mlm_loss(model, episode, r_mlm, observe),
        "mrm": mrm_loss(model, observe(node), scene_targets(world.graph, node, model.n_classes), r_mrm),
        "sap": sap_loss(model, world.graph, episode, observe),
    }
    total = ad.add(ad.add(ad.mul(parts["mlm"], cfg.lambda_mlm), ad.mul(parts["mrm"], cfg.lambda_mrm)), ad.mul(parts["sap"], cfg.lambda_sap))
    return total, parts


def _step(params, opt, total: Tensor, it: int, phase: str) -> None:
    try:
        ad.backward(total)
        opt.step()
    except NumericError as exc:
        raise NumericError(f"{phase} diverged at iteration {it}: {exc}") from exc
    opt.zero_grad()


def pretrain(
    model: AgentModel,
    worlds: Sequence[World],
    cfg: TrainConfig,
    rng: np.random.Generator,
    generated: Sequence[Mapping[int, Observation] | None] | None = None,
    on_step: Callable[[TraceEntry], None] | None = None,
) -> list[TraceEntry]:
    """Adam on the combined proxy loss, one episode per iteration.

    ``generated[i]`` (optional) maps node ids of world ``i`` to generated
    observations; such a world enters the sampling pool twice, once as is and
    once with every observation replaced.
    """
    pool = [(w, None) for w in worlds if w.episodes]
    if generated is not None:
        pool += [(w, g) for w, g in zip(worlds, generated) if g and w.episodes]
    if not pool:
        raise ValueError("pre-training corpus is empty")
    params = model.parameters()
    opt = ad.Adam(params, lr=cfg.lr_pt)
    trace = []
    for it in range(cfg.iters_pt):
        w, gen = pool[int(rng.integers(0, len(pool)))]
        ep = w.episodes[int(rng.integers(0, len(w.episodes)))]
        total, parts = pretrain_loss(model, w, ep, cfg, rng, gen)
        _step(params, opt, total, it, "pre-training")
        entry = TraceEntry(it, total.item(), {k: v.item() for k, v in parts.items()})
        trace.append(entry)
        if on_step is not None:
            on_step(entry)
    return trace


def finetune_loss(
    model: AgentModel,
    world: World,
    episode: Episode,
    cfg: TrainConfig,
    augment: Callable[[int], Observation] | None,
    epoch: int,
    rng: np.random.Generator,
):
    """``lambda * SAP + PID`` on a trajectory whose observations are mixed at ratio p."""
    original = [world.observe(n) for n in episode.path]
    generated = {}
    if cfg.mix.count(len(original)) > 0:
        if augment is None:
            raise ValueError("mix ratio > 0 needs a generator")
        generated = {n: augment(n) for n in episode.path}
    mixed = mix_environment(original, generated, cfg.mix, epoch)
    observe = _lookup(world, {o.node: o for o in mixed})
    sap = sap_loss(model, world.graph, episode, observe)
    pid, path = pid_loss(model, world.graph, episode, observe, cfg.max_steps, cfg.temperature, rng)
    total = ad.add(ad.mul(sap, cfg.lambda_ft), pid)
    return total, {"sap": sap, "pid": pid}, mixed


def finetune(
    model: AgentModel,
    worlds: Sequence[World],
    cfg: TrainConfig,
    rng: np.random.Generator,
    augmenters: Sequence[Callable[[int], Observation] | None] | None = None,
    on_step: Callable[[TraceEntry], None] | None = None,
) -> list[TraceEntry]:
    """Fine-tune with pseudo-interactive demonstrations; ``augmenters[i](node)`` yields world i's generated view."""
    pool = [i for i, w in enumerate(worlds) if w.episodes]
    if not pool:
        raise ValueError("fine-tuning corpus is empty")
    params = model.parameters()
    opt = ad.Adam(params, lr=cfg.lr_ft)
    trace = []
    for it in range(cfg.iters_ft):
        i = pool[int(rng.integers(0, len(pool)))]
        w = worlds[i]
        ep = w.episodes[int(rng.integers(0, len(w.episodes)))]
        aug = augmenters[i] if augmenters is not None else None
        total, parts, _ = finetune_loss(model, w, ep, cfg, aug, it, rng)
        _step(params, opt, total, it, "fine-tuning")
        entry = TraceEntry(it, total.item(), {k: v.item() for k, v in parts.items()})
        trace.append(entry)
        if on_step is not None:
            on_step(entry)
    return trace


# ---------------------------------------------------------------------------
# checkpoints


def save_agent(path: str | os.PathLike, model: AgentModel) -> None:
    checkpoint.save(path, model.state())


def agent_from_state(state: Mapping[str, np.ndarray], vocab: Vocabulary | None = None) -> AgentModel:
    try:
        cfg = {k[len("config.") :]: int(v[0]) for k, v in state.items() if k.startswith("config.")}
        model = AgentModel(vocab, cfg["view_dim"], cfg["d"], cfg["hidden"], cfg["n_classes"])
        model.load_state_dict({k[len("agent.") :]: v for k, v in state.items() if k.startswith("agent.")})
        model.text.load_state_dict({k[len("text.") :]: v for k, v in state.items() if k.startswith("text.")})
    except KeyError as exc:
        raise checkpoint.FormatError(f"agent checkpoint lacks {exc}") from exc
    return model


def load_agent(path: str | os.PathLike, vocab: Vocabulary | None = None) -> AgentModel:
    return agent_from_state(checkpoint.load(path), vocab)
