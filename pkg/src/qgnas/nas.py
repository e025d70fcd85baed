"""Joint architecture and quantisation search.

Gradient-based one-shot search over a supernet. Two controllers (one for
architecture sites, one for quantisation sites) each hold a trainable
embedding and linear head per decision site, producing input-independent
logits. Every epoch, annealed Gumbel noise is added to the logits and the
per-site argmax picks a single path; the supernet weights train on the task
loss for a few inner steps, then the controllers train on the validation
loss through straight-through gates, with the quantisation controller also
pulled towards cheaper options by a differentiable size penalty (the
expected parameter count of each sub-block times its expected weight bits).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .graphdata import Graph, sample_subgraph
from .quant import QUANT_PAIRS
from .supernet import ArchChoice, Choices, SuperNet

EMBED_DIM = 16


class SearchDiverged(RuntimeError):
    """Raised when a search loss stops being finite; carries a state dump."""

    def __init__(self, message: str, state: dict):
        super().__init__(message)
        self.state = state


# ---------------------------------------------------------------------------
# controllers
# ---------------------------------------------------------------------------


class Controller:
    """Per-site logits from a trainable embedding and linear head.

    The logits see no input data; the controller is a bank of free
    parameters shaped by the gradient signal alone. Softmax temperature is
    fixed at 1.
    """

    def __init__(self, sites, rng: np.random.Generator):
        self.sites = [(name, int(n)) for name, n in sites]
        self.params: dict[str, Tensor] = {}
        for name, n in self.sites:
            emb = rng.normal(0.0, 0.1, size=EMBED_DIM)
            head = rng.normal(0.0, 0.1, size=(EMBED_DIM, n))
            self.params[f"{name}/emb"] = ad.parameter(emb)
            self.params[f"{name}/head"] = ad.parameter(head)

    def site_names(self) -> list[str]:
        return [name for name, _ in self.sites]

    def logits(self, site: str) -> Tensor:
        emb = self.params[f"{site}/emb"]
        head = self.params[f"{site}/head"]
        return ad.reshape(ad.matmul(ad.reshape(emb, (1, -1)), head), (-1,))

    def probs(self, site: str, noise: np.ndarray | None = None) -> Tensor:
        z = self.logits(site)
        if noise is not None:
            z = ad.add(z, ad.constant(noise))
        return ad.softmax1d(z)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}


# ---------------------------------------------------------------------------
# noise schedule and sampling
# ---------------------------------------------------------------------------


def noise_temperature(epoch: int, total_epochs: int, scale: float) -> float:
    """Linear anneal from ``scale`` at epoch 0 to zero at the final epoch."""
    return scale * max(0.0, 1.0 - epoch / total_epochs)


def noise_gen(sites, epoch: int, total_epochs: int, scale: float,
              seed: int, stream: int = 0) -> dict[str, np.ndarray]:
    """Annealed Gumbel noise per site, deterministic in (seed, epoch)."""
    tau = noise_temperature(epoch, total_epochs, scale)
    rng = np.random.default_rng(np.random.SeedSequence((seed, stream, epoch)))
    return {name: tau * rng.gumbel(size=n) for name, n in sites}


def uniform_picks(sites, epoch: int, seed: int, stream: int) -> dict[str, int]:
    """One uniformly random option index per site (warm-up sampling)."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, stream, epoch)))
    return {name: int(rng.integers(n)) for name, n in sites}


def sample_choices(p_a: Mapping[str, object], p_q: Mapping[str, object]):
    """Per-site argmax indices; ties break to the lowest index."""

    def pick(table):
        out = {}
        for site, p in table.items():
            arr = p.data if isinstance(p, Tensor) else np.asarray(p)
            out[site] = int(np.argmax(arr))
        return out

    return pick(p_a), pick(p_q)


def choices_from_indices(net: SuperNet, pi_a: Mapping[str, int],
                         pi_q: Mapping[str, int] | None) -> Choices:
    """Materialise sampled option indices into a concrete network choice."""
    blocks, routes = [], []
    for k in range(net.n_layers):
        blocks.append(ArchChoice(
            attention=net.attention_options[pi_a[f"block{k}/attention"]],
            activation=net.activation_options[pi_a[f"block{k}/activation"]],
            aggregation=net.aggregation_options[pi_a[f"block{k}/aggregation"]],
            expansion=net.expansion_options[pi_a[f"block{k}/expansion"]],
        ))
        on = tuple(s for s in range(k + 1) if pi_a[f"block{k}/route{s}"] == 1)
        routes.append(on if on else (k,))
    quant = None
    if pi_q is not None:
        quant = {site: QUANT_PAIRS[idx] for site, idx in pi_q.items()}
    return Choices(tuple(blocks), tuple(routes), quant)


def ste_gate(probs: Tensor, index: int) -> Tensor:
    """Scalar gate: exactly 1.0 forward, so the sampled path computes as if
    ungated; backward routes the full upstream gradient into the chosen
    option's probability (hard-forward, soft-backward)."""
    out = Tensor(np.asarray(1.0, dtype=ad.DTYPE))

    def bw(g):
        full = np.zeros_like(probs.data)
        full[index] = float(g)
        ad._accum(probs, full)

    return ad.record(out, (probs,), bw)


# ---------------------------------------------------------------------------
# size penalty
# ---------------------------------------------------------------------------


@dataclass
class CostTables:
    """Aligned cost vectors: for each parameter-carrying sub-block, the
    parameter count of every architecture option and the weight bits of
    every quantisation option."""

    groups: tuple

    @classmethod
    def from_supernet(cls, net: SuperNet) -> "CostTables":
        return cls(tuple(net.cost_groups()))


def qloss(p_a: Mapping[str, Tensor], p_q: Mapping[str, Tensor],
          costs: CostTables) -> Tensor:
    """Expected hardware cost: per group, (expected parameter count) times
    (expected weight bits), summed. Differentiable in both prob tables."""
    terms = []
    for arch_site, s_vec, quant_site, sq_vec in costs.groups:
        if arch_site not in p_a or quant_site not in p_q:
            raise ValueError(f"cost tables misaligned with sites: {arch_site}, {quant_site}")
        pa, pq = p_a[arch_site], p_q[quant_site]
        if pa.data.shape[0] != len(s_vec) or pq.data.shape[0] != len(sq_vec):
            raise ValueError(f"cost vector length mismatch at {arch_site}/{quant_site}")
        terms.append(ad.mul(ad.dot_const(pa, s_vec), ad.dot_const(pq, sq_vec)))
    if not terms:
        return ad.constant(np.asarray(0.0))
    return ad.add_n(terms)


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------


class Adam:
    """Adam with per-parameter state; parameters without a gradient are not
    stepped and their state does not advance (so untouched candidates stay
    bitwise identical)."""

    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self._state: dict[int, list] = {}

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                continue
            st = self._state.get(id(p))
            if st is None:
                st = [0, np.zeros_like(p.data), np.zeros_like(p.data)]
                self._state[id(p)] = st
            st[0] += 1
            t, m, v = st[0], st[1], st[2]
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            mhat = m / (1.0 - self.b1 ** t)
            vhat = v / (1.0 - self.b2 ** t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


# ---------------------------------------------------------------------------
# the search loop
# ---------------------------------------------------------------------------


@dataclass
class SearchConfig:
    """Knobs of one search run.

    ``arch_start`` and ``quant_start`` delay the respective controller: until
    an epoch exceeds them, that controller's picks are uniformly random
    (supernet warm-up) and its weights stay frozen.
    """

    epochs: int = 60
    arch_start: int = 50
    quant_start: int = 20
    inner_steps: int = 2
    noise_scale: float = 1.0
    size_weight: float = 0.1
    lr: float = 0.005
    seed: int = 0
    sample_nodes: int | None = None
    size_to_arch: bool = False  # let the size penalty also shape architecture

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not (0 <= self.quant_start <= self.epochs) or not (0 <= self.arch_start <= self.epochs):
            raise ValueError("start epochs must lie in [0, epochs]")
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")
        if self.size_weight < 0:
            raise ValueError("size_weight must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


def _epoch_graph(g: Graph, cfg: SearchConfig, epoch: int) -> Graph:
    if cfg.sample_nodes is None or cfg.sample_nodes >= g.n:
        return g
    seed = int(np.random.SeedSequence((cfg.seed, 9, epoch)).generate_state(1)[0])
    sub = sample_subgraph(g, cfg.sample_nodes, seed)
    if not sub.train_mask.any() or not sub.val_mask.any():
        return g  # degenerate draw; train full-batch this epoch
    return sub


def search(net: SuperNet, g: Graph, cfg: SearchConfig,
           probe: Callable[[int, dict], None] | None = None,
           ) -> tuple[Choices, list[dict]]:
    """Run the joint search and return (final choices, per-epoch log).

    Each epoch: draw annealed Gumbel noise, form per-site probabilities,
    argmax-sample one path (uniform random for controllers still warming
    up), train the supernet weights on the training split for
    ``inner_steps`` steps, then update active controllers on the validation
    loss, the quantisation controller additionally on the size penalty.
    The returned choices are the noise-free argmax after the last epoch.
    ``probe``, when given, is called after every epoch's updates with a
    state dict (sampled choices, controllers, supernet) — an inspection
    hook for tests and instrumentation.
    """
    cfg.validate()
    arch_sites = net.arch_sites()
    quant_sites = net.quant_sites()
    ctrl_a = Controller(arch_sites, np.random.default_rng(
        np.random.SeedSequence((cfg.seed, 1))))
    ctrl_q = Controller(quant_sites, np.random.default_rng(
        np.random.SeedSequence((cfg.seed, 2))))
    costs = CostTables.from_supernet(net)
    opt_w = Adam(net.params.values(), cfg.lr)
    opt_a = Adam(ctrl_a.parameters(), cfg.lr)
    opt_q = Adam(ctrl_q.parameters(), cfg.lr)
    drop_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 3)))

    log: list[dict] = []
    for epoch in range(cfg.epochs):
        g_e = _epoch_graph(g, cfg, epoch)
        arch_active = epoch > cfg.arch_start
        quant_active = epoch > cfg.quant_start
        noise_a = noise_gen(arch_sites, epoch, cfg.epochs, cfg.noise_scale, cfg.seed, 0)
        noise_q = noise_gen(quant_sites, epoch, cfg.epochs, cfg.noise_scale, cfg.seed, 1)
        warm_a = uniform_picks(arch_sites, epoch, cfg.seed, 2)
        warm_q = uniform_picks(quant_sites, epoch, cfg.seed, 3)

        with Tape() as tape:
            p_a = {s: ctrl_a.probs(s, noise_a[s]) for s, _ in arch_sites}
            p_q = {s: ctrl_q.probs(s, noise_q[s]) for s, _ in quant_sites}
            pi_a, pi_q = sample_choices(p_a, p_q)
            if not arch_active:
                pi_a = warm_a
            if not quant_active:
                pi_q = warm_q
            choices = choices_from_indices(net, pi_a, pi_q)

            train_loss = np.nan
            for _ in range(cfg.inner_steps):
                with Tape() as inner:
                    t_loss, _ = net.loss(g_e, choices, g_e.train_mask,
                                         train=True, rng=drop_rng)
                    inner.backward(t_loss)
                train_loss = t_loss.item()
                if not np.isfinite(train_loss):
                    raise SearchDiverged(
                        f"non-finite training loss at epoch {epoch}",
                        state={"epoch": epoch, "train_loss": train_loss,
                               "arch_indices": pi_a, "quant_indices": pi_q})
                opt_w.step()
                opt_w.zero_grad()

            gates: dict[str, Tensor] = {}
            if arch_active:
                for site, _ in arch_sites:
                    idx = pi_a[site]
                    if "/route" in site and idx != 1:
                        continue  # only routes switched on appear in the path
                    gates[site] = ste_gate(p_a[site], idx)
            if quant_active:
                for site, _ in quant_sites:
                    gates[site] = ste_gate(p_q[site], pi_q[site])
            l_v, _ = net.loss(g_e, choices, g_e.val_mask,
                              gates=gates if gates else None)
            total = l_v
            l_q_value = None
            if quant_active and cfg.size_weight > 0:
                arch_probs = p_a if cfg.size_to_arch \
                    else {s: ad.detach(t) for s, t in p_a.items()}
                l_q = qloss(arch_probs, p_q, costs)
                l_q_value = l_q.item()
                total = ad.add(total, ad.scale(l_q, cfg.size_weight))
            if not np.isfinite(total.item()):
                raise SearchDiverged(
                    f"non-finite search loss at epoch {epoch}",
                    state={"epoch": epoch, "val_loss": l_v.item(),
                           "size_loss": l_q_value,
                           "arch_indices": pi_a, "quant_indices": pi_q})
            tape.backward(total)

        if arch_active:
            opt_a.step()
        if quant_active:
            opt_q.step()
        ctrl_a.zero_grad()
        ctrl_q.zero_grad()
        opt_w.zero_grad()

        log.append({
            "epoch": epoch,
            "temperature": noise_temperature(epoch, cfg.epochs, cfg.noise_scale),
            "train_loss": float(train_loss),
            "val_loss": float(l_v.item()),
            "size_loss": l_q_value,
            "arch_indices": dict(pi_a),
            "quant_indices": dict(pi_q),
            "model_bytes": net.model_size_bytes(choices),
            "buffer_bytes": net.buffer_size_bytes(choices, g),
        })
        if probe is not None:
            probe(epoch, {"choices": choices, "arch_controller": ctrl_a,
                          "quant_controller": ctrl_q, "net": net})

    final_a = {s: ctrl_a.probs(s) for s, _ in arch_sites}
    final_q = {s: ctrl_q.probs(s) for s, _ in quant_sites}
    pi_a, pi_q = sample_choices(final_a, final_q)
    final = choices_from_indices(net, pi_a, pi_q)
    log.append({
        "epoch": "final",
        "arch_indices": pi_a,
        "quant_indices": pi_q,
        "model_bytes": net.model_size_bytes(final),
        "buffer_bytes": net.buffer_size_bytes(final, g),
    })
    return final, log
