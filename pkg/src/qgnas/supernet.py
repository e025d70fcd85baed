"""The searchable quantised GNN.

Each graph block is Linear -> Attention -> Aggregation -> Activation with all
candidate sub-block operations allocated side by side; a forward pass under
sampled choices executes exactly one candidate per sub-block (single path).
A router feeds every block a gated sum of earlier outputs: the immediate
predecessor passes through directly, earlier outputs ("shortcuts") pass
through one quantisable linear projection each.

Quantisation granularity is four decision sites per block — linear,
attention, aggregation, router — each holding one (weight, activation)
scheme pair; the aggregation site uses only the activation half. The input
projection and output classifier borrow the first and last block's linear
site pair.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import DTYPE, Tensor
from .graphdata import Graph, metrics
from .quant import QuantPair, parse_pair, quantise

ATTENTION_TYPES = ("const", "gcn", "gat", "sym-gat", "cos", "linear", "gene-linear")
ACTIVATION_TYPES = ad.ACTIVATION_KINDS
AGGREGATION_TYPES = ("mean", "add", "max")
EXPANSION_FACTORS = (1, 2, 4, 8)

GAT_SCORE_SLOPE = 0.2  # leaky slope inside GAT-style attention scores

QUANT_SUB_SITES = ("linear", "attention", "aggregation", "router")


def arch_space_size() -> int:
    """Architecture options per layer."""
    return (len(ATTENTION_TYPES) * len(ACTIVATION_TYPES)
            * len(AGGREGATION_TYPES) * len(EXPANSION_FACTORS))


@dataclass(frozen=True)
class ArchChoice:
    """One block's sampled architecture."""

    attention: str = "const"
    activation: str = "relu"
    aggregation: str = "add"
    expansion: int = 1

    def __post_init__(self):
        if self.attention not in ATTENTION_TYPES:
            raise ValueError(f"unknown attention {self.attention!r}")
        if self.activation not in ACTIVATION_TYPES:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.aggregation not in AGGREGATION_TYPES:
            raise ValueError(f"unknown aggregation {self.aggregation!r}")
        if self.expansion not in EXPANSION_FACTORS:
            raise ValueError(f"unknown expansion {self.expansion!r}")


@dataclass
class Choices:
    """A fully sampled network: per-block architecture, route, quantisation.

    ``routes[k]`` lists the selected source ids for block k where source k is
    the immediate predecessor (block k-1's output, or the input embedding for
    block 0) and sources < k are shortcut connections. ``quant`` maps site
    names to pairs; None means float mode.
    """

    blocks: tuple[ArchChoice, ...]
    routes: tuple[tuple[int, ...], ...]
    quant: dict[str, QuantPair] | None = None

    def __post_init__(self):
        self.blocks = tuple(self.blocks)
        self.routes = tuple(tuple(sorted(r)) for r in self.routes)
        if len(self.routes) != len(self.blocks):
            raise ValueError("one route per block required")
        for k, r in enumerate(self.routes):
            if any(s < 0 or s > k for s in r):
                raise ValueError(f"route source out of range for block {k}: {r}")


def sequential_route(n_layers: int) -> tuple[tuple[int, ...], ...]:
    """Immediate predecessor only: a plain sequential network."""
    return tuple((k,) for k in range(n_layers))


def quant_site_names(n_layers: int) -> list[str]:
    return [f"block{k}/quant/{sub}" for k in range(n_layers) for sub in QUANT_SUB_SITES]


def uniform_quant(n_layers: int, pair) -> dict[str, QuantPair] | None:
    """The same pair at every site (how baselines are quantised)."""
    pair = parse_pair(pair)
    if pair is None:
        return None
    return {site: pair for site in quant_site_names(n_layers)}


def _act_bits(pair: QuantPair | None) -> int:
    return pair.activation.total_bits if pair is not None else 32


def _weight_bits(pair: QuantPair | None) -> int:
    return pair.weight.total_bits if pair is not None else 32


def _tensor_bytes(count: int, bits: int) -> int:
    return -(-count * bits // 8)  # ceil division


class SuperNet:
    """All candidate parameters for an n-layer searchable network.

    Option tuples can be restricted to single candidates, which is how fixed
    baseline architectures reuse the same engine (degenerate supernet).
    """

    def __init__(
        self,
        in_dim: int,
        hidden: int,
        n_classes: int,
        n_layers: int,
        multihot: bool = False,
        seed: int = 0,
        dropout: float = 0.0,
        attention_options=ATTENTION_TYPES,
        activation_options=ACTIVATION_TYPES,
        aggregation_options=AGGREGATION_TYPES,
        expansion_options=EXPANSION_FACTORS,
        input_scale: float | None = None,
    ):
        if n_layers < 1:
            raise ValueError("need at least one block")
        self.in_dim = in_dim
        self.hidden = hidden
        self.n_classes = n_classes
        self.n_layers = n_layers
        self.multihot = multihot
        self.seed = seed
        self.dropout = dropout
        self.attention_options = tuple(attention_options)
        self.activation_options = tuple(activation_options)
        self.aggregation_options = tuple(aggregation_options)
        self.expansion_options = tuple(expansion_options)
        self.input_scale = input_scale
        self.params: dict[str, Tensor] = {}
        self._init_params(np.random.default_rng(seed))

    # -- construction -----------------------------------------------------

    def _glorot(self, rng, fan_in, fan_out) -> np.ndarray:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=(fan_in, fan_out))

    def _add(self, name: str, data: np.ndarray) -> None:
        self.params[name] = Tensor(np.asarray(data, dtype=DTYPE), requires_grad=True)

    def _init_params(self, rng) -> None:
        h = self.hidden
        if self.input_scale is not None:
            limit = np.sqrt(3.0) * self.input_scale
            self._add("input_proj/W", rng.uniform(-limit, limit, size=(self.in_dim, h)))
        else:
            self._add("input_proj/W", self._glorot(rng, self.in_dim, h))
        for k in range(self.n_layers):
            for e in self.expansion_options:
                self._add(f"block{k}/linear/e{e}/W1", self._glorot(rng, h, e * h))
                self._add(f"block{k}/linear/e{e}/W2", self._glorot(rng, e * h, h))
            for att in self.attention_options:
                base = f"block{k}/attn/{att}"
                if att in ("gat", "sym-gat"):
                    self._add(f"{base}/a", rng.normal(0.0, 0.1, size=2 * h))
                elif att == "cos":
                    self._add(f"{base}/W1", self._glorot(rng, h, h))
                    self._add(f"{base}/W2", self._glorot(rng, h, h))
                elif att == "linear":
                    self._add(f"{base}/a", rng.normal(0.0, 0.1, size=h))
                elif att == "gene-linear":
                    self._add(f"{base}/W1", self._glorot(rng, h, h))
                    self._add(f"{base}/W2", self._glorot(rng, h, h))
                    self._add(f"{base}/g", rng.normal(0.0, 0.1, size=h))
                # const and gcn own no parameters
            for s in range(k):  # shortcut projections; immediate path is direct
                self._add(f"block{k}/route{s}/W", self._glorot(rng, h, h))
        self._add("classifier/W", self._glorot(rng, h, self.n_classes))

    # -- decision sites -----------------------------------------------------

    def arch_sites(self) -> list[tuple[str, int]]:
        """(name, option count) for every architecture decision site."""
        sites = []
        for k in range(self.n_layers):
            sites.append((f"block{k}/attention", len(self.attention_options)))
            sites.append((f"block{k}/activation", len(self.activation_options)))
            sites.append((f"block{k}/aggregation", len(self.aggregation_options)))
            sites.append((f"block{k}/expansion", len(self.expansion_options)))
            for s in range(k + 1):
                sites.append((f"block{k}/route{s}", 2))
        return sites

    def quant_sites(self) -> list[tuple[str, int]]:
        from .quant import QUANT_PAIRS
        return [(name, len(QUANT_PAIRS)) for name in quant_site_names(self.n_layers)]

    def _attention_param_count(self, att: str) -> int:
        h = self.hidden
        return {
            "const": 0, "gcn": 0, "gat": 2 * h, "sym-gat": 2 * h,
            "cos": 2 * h * h, "linear": h, "gene-linear": 2 * h * h + h,
        }[att]

    def cost_groups(self):
        """Pairs of (arch site, param-count vector, quant site, weight-bit
        vector) for the size regulariser — one group per parameter-carrying
        sub-block."""
        from .quant import QUANT_PAIRS
        sq = np.array([p.weight.total_bits for p in QUANT_PAIRS], dtype=float)
        h2 = float(self.hidden * self.hidden)
        groups = []
        for k in range(self.n_layers):
            exp_costs = np.array([2.0 * e * h2 for e in self.expansion_options])
            groups.append((f"block{k}/expansion", exp_costs,
                           f"block{k}/quant/linear", sq))
            att_costs = np.array([float(self._attention_param_count(a))
                                  for a in self.attention_options])
            groups.append((f"block{k}/attention", att_costs,
                           f"block{k}/quant/attention", sq))
            for s in range(k):
                groups.append((f"block{k}/route{s}", np.array([0.0, h2]),
                               f"block{k}/quant/router", sq))
        return groups

    # -- sampled-path execution ---------------------------------------------

    def _route(self, choices: Choices, k: int) -> tuple[int, ...]:
        r = choices.routes[k]
        return r if r else (k,)  # fallback: immediate predecessor

    @staticmethod
    def _site_pair(choices: Choices, site: str) -> QuantPair | None:
        if choices.quant is None:
            return None
        return choices.quant.get(site)

    def _gate(self, x: Tensor, gates, site: str) -> Tensor:
        if gates is None or site not in gates:
            return x
        return ad.scale_by(x, gates[site])

    def _attention_scores(self, g: Graph, k: int, att: str, lin: Tensor,
                          wscheme) -> Tensor:
        src, dst = g.edge_src, g.edge_dst
        if att == "const":
            return Tensor(np.ones(g.num_edges, dtype=DTYPE))
        if att == "gcn":
            d = g.in_degrees.astype(DTYPE)
            return Tensor(1.0 / np.sqrt(d[dst] * d[src]))
        h = self.hidden
        if att in ("gat", "sym-gat"):
            a = quantise(self.params[f"block{k}/attn/{att}/a"], wscheme)
            f_dst = ad.matvec(lin, _slice_vec(a, 0, h))
            f_src = ad.matvec(lin, _slice_vec(a, h, 2 * h))
            raw = ad.add(ad.gather_rows(f_dst, dst), ad.gather_rows(f_src, src))
            scores = ad.leaky_relu(raw, GAT_SCORE_SLOPE)
            if att == "sym-gat":
                scores = ad.add(scores, ad.gather_rows(scores, g.reverse_edge_index()))
            return scores
        if att == "cos":
            u = ad.matmul(lin, quantise(self.params[f"block{k}/attn/cos/W1"], wscheme))
            v = ad.matmul(lin, quantise(self.params[f"block{k}/attn/cos/W2"], wscheme))
            return ad.row_sum(ad.mul(ad.gather_rows(u, dst), ad.gather_rows(v, src)))
        if att == "linear":
            a = quantise(self.params[f"block{k}/attn/linear/a"], wscheme)
            s = ad.matvec(lin, a)
            summed = ad.segment_aggregate(ad.reshape(ad.gather_rows(s, src), (-1, 1)),
                                          dst, g.n, "add")
            per_node = ad.tanh(ad.reshape(summed, (-1,)))
            return ad.gather_rows(per_node, dst)
        if att == "gene-linear":
            u = ad.matmul(lin, quantise(self.params[f"block{k}/attn/gene-linear/W1"], wscheme))
            v = ad.matmul(lin, quantise(self.params[f"block{k}/attn/gene-linear/W2"], wscheme))
            mixed = ad.tanh(ad.add(ad.gather_rows(u, dst), ad.gather_rows(v, src)))
            gvec = quantise(self.params[f"block{k}/attn/gene-linear/g"], wscheme)
            return ad.matvec(mixed, gvec)
        raise ValueError(f"unknown attention {att!r}")

    def _block_body(self, g: Graph, h_in: Tensor, k: int, arch: ArchChoice,
                    lpair, apair, gpair, train: bool, rng, gates, rec) -> Tensor:
        if train and self.dropout > 0.0:
            if rng is None:
                raise ValueError("training with dropout needs an rng")
            h_in = ad.dropout(h_in, self.dropout, rng)
        wset = lpair.weight if lpair else None
        aset = lpair.activation if lpair else None
        xq = quantise(h_in, aset)
        rec(f"block{k}/input", xq.data.size, _act_bits(lpair))
        e = arch.expansion
        w1 = quantise(self.params[f"block{k}/linear/e{e}/W1"], wset)
        w2 = quantise(self.params[f"block{k}/linear/e{e}/W2"], wset)
        mid = quantise(ad.activation(ad.matmul(xq, w1), "relu"), aset)
        rec(f"block{k}/expansion_mid", mid.data.size, _act_bits(lpair))
        lin = quantise(ad.matmul(mid, w2), aset)
        rec(f"block{k}/linear_out", lin.data.size, _act_bits(lpair))
        lin = self._gate(lin, gates, f"block{k}/expansion")
        lin = self._gate(lin, gates, f"block{k}/quant/linear")

        scores = self._attention_scores(g, k, arch.attention, lin,
                                        apair.weight if apair else None)
        scores = self._gate(scores, gates, f"block{k}/attention")
        rec(f"block{k}/attn_scores", scores.data.size, _act_bits(apair))
        coeff = ad.segment_softmax(scores, g.edge_dst, g.n)
        rec(f"block{k}/attn_coeff", coeff.data.size, _act_bits(apair))
        msgs = ad.scale_rows(ad.gather_rows(lin, g.edge_src), coeff)
        msgs = quantise(msgs, apair.activation if apair else None)
        rec(f"block{k}/attn_messages", msgs.data.size, _act_bits(apair))
        msgs = self._gate(msgs, gates, f"block{k}/quant/attention")

        agg = ad.segment_aggregate(msgs, g.edge_dst, g.n, arch.aggregation)
        agg = quantise(agg, gpair.activation if gpair else None)
        rec(f"block{k}/aggregated", agg.data.size, _act_bits(gpair))
        agg = self._gate(agg, gates, f"block{k}/aggregation")
        agg = self._gate(agg, gates, f"block{k}/quant/aggregation")
        out = ad.activation(agg, arch.activation)
        rec(f"block{k}/output", out.data.size, _act_bits(gpair))
        return self._gate(out, gates, f"block{k}/activation")

    def block_forward(self, g: Graph, h_in: Tensor, k: int, arch: ArchChoice,
                      qw=None, qa=None, train: bool = False, rng=None) -> Tensor:
        """One block under a single (weight scheme, activation scheme) pair."""
        pair = QuantPair(qw, qa) if (qw is not None and qa is not None) else None
        if (qw is None) != (qa is None):
            raise ValueError("block_forward quantises both halves or neither")
        return self._block_body(g, h_in, k, arch, pair, pair, pair,
                                train, rng, None, lambda *a: None)

    def forward(self, g: Graph, choices: Choices, train: bool = False,
                rng=None, gates=None, recorder: list | None = None) -> Tensor:
        """Logits [n, c] for the sampled network. ``recorder`` collects
        (stage name, element count, activation bits) for buffer accounting."""
        if len(choices.blocks) != self.n_layers:
            raise ValueError("choices do not match layer count")
        rec = (lambda name, count, bits: recorder.append((name, count, bits))) \
            if recorder is not None else (lambda *a: None)

        p_in = self._site_pair(choices, "block0/quant/linear")
        x = Tensor(g.features)
        w = quantise(self.params["input_proj/W"], p_in.weight if p_in else None)
        h = quantise(ad.matmul(x, w), p_in.activation if p_in else None)
        rec("input_proj", h.data.size, _act_bits(p_in))

        outputs = [h]
        for k in range(self.n_layers):
            rpair = self._site_pair(choices, f"block{k}/quant/router")
            route = self._route(choices, k)
            terms = []
            for s in route:
                src = outputs[s]
                if s == k:
                    terms.append(self._gate(src, gates, f"block{k}/route{s}"))
                    continue
                wr = quantise(self.params[f"block{k}/route{s}/W"],
                              rpair.weight if rpair else None)
                t = quantise(ad.matmul(src, wr), rpair.activation if rpair else None)
                rec(f"block{k}/shortcut{s}", t.data.size, _act_bits(rpair))
                t = self._gate(t, gates, f"block{k}/route{s}")
                terms.append(self._gate(t, gates, f"block{k}/quant/router"))
            if len(terms) > 1:
                h_in = quantise(ad.add_n(terms), rpair.activation if rpair else None)
                rec(f"block{k}/route_sum", h_in.data.size, _act_bits(rpair))
            else:
                h_in = terms[0]
            outputs.append(self._block_body(
                g, h_in, k, choices.blocks[k],
                self._site_pair(choices, f"block{k}/quant/linear"),
                self._site_pair(choices, f"block{k}/quant/attention"),
                self._site_pair(choices, f"block{k}/quant/aggregation"),
                train, rng, gates, rec))

        p_out = self._site_pair(choices, f"block{self.n_layers - 1}/quant/linear")
        wc = quantise(self.params["classifier/W"], p_out.weight if p_out else None)
        logits = quantise(ad.matmul(outputs[-1], wc),
                          p_out.activation if p_out else None)
        rec("classifier", logits.data.size, _act_bits(p_out))
        return logits

    def loss(self, g: Graph, choices: Choices, mask: np.ndarray,
             train: bool = False, rng=None, gates=None) -> tuple[Tensor, Tensor]:
        logits = self.forward(g, choices, train=train, rng=rng, gates=gates)
        if self.multihot:
            return ad.sigmoid_binary_cross_entropy(logits, g.labels, mask), logits
        return ad.softmax_cross_entropy(logits, g.labels, mask), logits

    def evaluate(self, g: Graph, choices: Choices, mask: np.ndarray) -> float:
        logits = self.forward(g, choices, train=False)
        return metrics(logits.data, g.labels, mask)

    # -- accounting -----------------------------------------------------------

    def sampled_param_names(self, choices: Choices) -> list[str]:
        """Parameter tensors the sampled path touches, with their weight-bit
        site, as (name, site) pairs flattened to names here."""
        return [name for name, _ in self._sampled_with_sites(choices)]

    def _sampled_with_sites(self, choices: Choices) -> list[tuple[str, str]]:
        out = [("input_proj/W", "block0/quant/linear")]
        for k in range(self.n_layers):
            e = choices.blocks[k].expansion
            out.append((f"block{k}/linear/e{e}/W1", f"block{k}/quant/linear"))
            out.append((f"block{k}/linear/e{e}/W2", f"block{k}/quant/linear"))
            att = choices.blocks[k].attention
            base = f"block{k}/attn/{att}"
            for suffix in ("a", "W1", "W2", "g"):
                if f"{base}/{suffix}" in self.params:
                    out.append((f"{base}/{suffix}", f"block{k}/quant/attention"))
            for s in self._route(choices, k):
                if s != k:
                    out.append((f"block{k}/route{s}/W", f"block{k}/quant/router"))
        out.append(("classifier/W", f"block{self.n_layers - 1}/quant/linear"))
        return out

    def sampled_parameters(self, choices: Choices) -> list[Tensor]:
        return [self.params[name] for name in self.sampled_param_names(choices)]

    def model_size_bytes(self, choices: Choices) -> int:
        """Sum over sampled parameter tensors of count x weight bits, in bytes."""
        total = 0
        for name, site in self._sampled_with_sites(choices):
            pair = self._site_pair(choices, site)
            total += _tensor_bytes(self.params[name].data.size, _weight_bits(pair))
        return total

    def buffer_size_bytes(self, choices: Choices, g: Graph) -> int:
        """Bytes to hold every intermediate activation of one forward pass,
        computed from configuration arithmetic (no forward run)."""
        n, e_cnt, h, c = g.n, g.num_edges, self.hidden, self.n_classes
        total = 0

        def stage(count: int, pair) -> None:
            nonlocal total
            total += _tensor_bytes(count, _act_bits(pair))

        stage(n * h, self._site_pair(choices, "block0/quant/linear"))
        for k in range(self.n_layers):
            rpair = self._site_pair(choices, f"block{k}/quant/router")
            lpair = self._site_pair(choices, f"block{k}/quant/linear")
            apair = self._site_pair(choices, f"block{k}/quant/attention")
            gpair = self._site_pair(choices, f"block{k}/quant/aggregation")
            route = self._route(choices, k)
            shortcuts = [s for s in route if s != k]
            for _ in shortcuts:
                stage(n * h, rpair)
            if len(route) > 1:
                stage(n * h, rpair)
            stage(n * h, lpair)                               # quantised input
            stage(n * h * choices.blocks[k].expansion, lpair)  # expansion mid
            stage(n * h, lpair)                               # linear out
            stage(e_cnt, apair)                               # scores
            stage(e_cnt, apair)                               # softmax coeffs
            stage(e_cnt * h, apair)                           # attended messages
            stage(n * h, gpair)                               # aggregated
            stage(n * h, gpair)                               # block output
        stage(n * c, self._site_pair(choices, f"block{self.n_layers - 1}/quant/linear"))
        return total


def _slice_vec(t: Tensor, lo: int, hi: int) -> Tensor:
    """Differentiable 1-D slice."""
    out = Tensor(t.data[lo:hi])

    def bw(g):
        full = np.zeros_like(t.data)
        full[lo:hi] = g
        ad._accum(t, full)

    return ad.record(out, (t,), bw)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def choices_to_json(choices: Choices) -> dict:
    """Plain-JSON form of a Choices value; inverse of choices_from_json."""
    return {
        "blocks": [dataclasses.asdict(b) for b in choices.blocks],
        "routes": [list(r) for r in choices.routes],
        "quant": None if choices.quant is None
        else {site: pair.name for site, pair in choices.quant.items()},
    }


def choices_from_json(data: dict) -> Choices:
    quant = None if data["quant"] is None else {
        site: parse_pair(name) for site, name in data["quant"].items()}
    return Choices(
        blocks=tuple(ArchChoice(**b) for b in data["blocks"]),
        routes=tuple(tuple(r) for r in data["routes"]),
        quant=quant,
    )


def save_checkpoint(path, net: SuperNet, choices: Choices) -> None:
    """Persist the sampled model: config, choices, and the raw parameter
    arrays of the sampled path. Arrays round-trip bit-exactly via npz."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": {
            "in_dim": net.in_dim, "hidden": net.hidden,
            "n_classes": net.n_classes, "n_layers": net.n_layers,
            "multihot": net.multihot, "seed": net.seed,
            "dropout": net.dropout,
            "attention_options": list(net.attention_options),
            "activation_options": list(net.activation_options),
            "aggregation_options": list(net.aggregation_options),
            "expansion_options": list(net.expansion_options),
            "input_scale": net.input_scale,
        },
        "choices": choices_to_json(choices),
    }
    arrays = {f"param/{name}": net.params[name].data
              for name in net.sampled_param_names(choices)}
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
                 **arrays)


def load_checkpoint(path) -> tuple[SuperNet, Choices]:
    """Rebuild a supernet and its sampled choices; saved arrays overwrite the
    freshly initialised parameters of the sampled path."""
    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(bytes(z["meta"].tobytes()).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version: {meta.get('version')}")
        cfg = meta["config"]
        net = SuperNet(
            in_dim=cfg["in_dim"], hidden=cfg["hidden"], n_classes=cfg["n_classes"],
            n_layers=cfg["n_layers"], multihot=cfg["multihot"], seed=cfg["seed"],
            dropout=cfg["dropout"],
            attention_options=tuple(cfg["attention_options"]),
            activation_options=tuple(cfg["activation_options"]),
            aggregation_options=tuple(cfg["aggregation_options"]),
            expansion_options=tuple(cfg["expansion_options"]),
            input_scale=cfg["input_scale"],
        )
        choices = choices_from_json(meta["choices"])
        for key in z.files:
            if key.startswith("param/"):
                name = key[len("param/"):]
                net.params[name] = Tensor(z[key].copy(), requires_grad=True)
    return net, choices
