"""Draft-verify engine: dynamic tree construction, greedy and
rejection-sampling verification, cache rollback and metric accounting.

Verification runs one logical target forward over the pending token plus
all tree nodes.  Internally each node is evaluated with the single-token
kernel against its gathered ancestor context, which makes the logits along
any root chain bit-identical to plain incremental decoding - the property
that gives greedy speculative decoding its losslessness guarantee at the
bit level.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .drafters import payload_rows
from .errors import CapacityError, ContractError, DimensionError, StructureError
from .target import GreedySampler, forward_full, forward_token


@dataclass(frozen=True)
class TreeNode:
    token: int
    parent: int  # node index, -1 for the root attachment point
    depth: int
    logprob: float
    joint_logprob: float


@dataclass
class DraftTree:
    nodes: list[TreeNode]
    breadth: int
    depth: int
    budget: int

    def __post_init__(self):
        self.validate()

    def validate(self):
        if len(self.nodes) > self.budget:
            raise StructureError(f"tree holds {len(self.nodes)} nodes, budget is {self.budget}")
        for i, n in enumerate(self.nodes):
            if not -1 <= n.parent < i:
                raise StructureError(f"node {i} references parent {n.parent}")
            if n.depth > self.depth:
                raise StructureError(f"node {i} at depth {n.depth} exceeds {self.depth}")
            if n.parent == -1:
                if n.depth != 1:
                    raise StructureError(f"root-level node {i} has depth {n.depth}")
                if abs(n.joint_logprob - n.logprob) > 1e-6:
                    raise StructureError(f"node {i} joint mismatch at the root level")
            else:
                parent = self.nodes[n.parent]
                if n.depth != parent.depth + 1:
                    raise StructureError(f"node {i} depth does not follow its parent")
                if abs(n.joint_logprob - (parent.joint_logprob + n.logprob)) > 1e-5:
                    raise StructureError(f"node {i} violates the joint-logprob recurrence")

    def tokens(self) -> list[int]:
        return [n.token for n in self.nodes]

    def parents(self) -> list[int]:
        return [n.parent for n in self.nodes]


def _log_softmax64(logits: np.ndarray) -> np.ndarray:
    x = logits.astype(np.float64)
    x -= x.max()
    return x - np.log(np.exp(x).sum())


def _top_tokens(logp: np.ndarray, count: int) -> list[int]:
    # ties resolve to the lowest token id
    order = np.lexsort((np.arange(logp.size), -logp))
    return [int(t) for t in order[:count]]


def build_tree(drafter, state, breadth: int, depth: int, budget: int) -> DraftTree:
    """EAGLE-2 style dynamic tree.

    The root level expands the top ``breadth`` tokens; each later level
    scores every live branch's top ``breadth`` children (breadth^2
    candidates, all recorded as nodes) and keeps the ``breadth`` best by
    joint log-probability as the next frontier.  Finally the ``budget``
    highest-joint nodes are retained; joint log-probabilities are monotone
    along paths, so the cut set is automatically ancestor-closed.
    """
    if breadth < 1 or depth < 1 or budget < breadth:
        raise DimensionError(f"need breadth,depth >= 1 and budget >= breadth, got {breadth},{depth},{budget}")
    base = drafter.clone_state(state)
    logp = _log_softmax64(drafter.draft_next(base))
    nodes: list[TreeNode] = []
    frontier: list[tuple[int, object]] = []  # (node index, drafter state)
    for tok in _top_tokens(logp, breadth):
        nodes.append(TreeNode(tok, -1, 1, float(logp[tok]), float(logp[tok])))
    for idx in range(len(nodes)):
        st = drafter.clone_state(base)
        drafter.append_drafted(st, nodes[idx].token)
        frontier.append((idx, st))
    for level in range(2, depth + 1):
        candidates: list[int] = []
        scored_states = []
        for idx, st in frontier:
            logp = _log_softmax64(drafter.draft_next(st))
            scored_states.append((idx, st))
            for tok in _top_tokens(logp, breadth):
                node = TreeNode(
                    tok, idx, level, float(logp[tok]), nodes[idx].joint_logprob + float(logp[tok])
                )
                candidates.append(len(nodes))
                nodes.append(node)
        candidates.sort(key=lambda i: (-nodes[i].joint_logprob, nodes[i].token, nodes[i].parent))
        frontier = []
        parent_states = dict(scored_states)
        for i in candidates[:breadth]:
            st = drafter.clone_state(parent_states[nodes[i].parent])
            drafter.append_drafted(st, nodes[i].token)
            frontier.append((i, st))
    # budget truncation: top-m by joint, parents sort ahead of children
    order = sorted(range(len(nodes)), key=lambda i: (-nodes[i].joint_logprob, i))
    keep = sorted(order[:budget])
    keep_set = set(keep)
    for i in keep:
        if nodes[i].parent != -1 and nodes[i].parent not in keep_set:
            raise StructureError("budget truncation broke ancestor closure")
    remap = {old: new for new, old in enumerate(keep)}
    pruned = [
        TreeNode(
            nodes[i].token,
            -1 if nodes[i].parent == -1 else remap[nodes[i].parent],
            nodes[i].depth,
            nodes[i].logprob,
            nodes[i].joint_logprob,
        )
        for i in keep
    ]
    return DraftTree(pruned, breadth, depth, budget)


def draft_chain_sampling(drafter, state, k: int, rng: np.random.Generator):
    """Sample a k-token chain from the drafter, recording each step's full
    proposal distribution."""
    st = drafter.clone_state(state)
    tokens, dists = [], []
    for _ in range(k):
        logits = drafter.draft_next(st)
        p = np.exp(_log_softmax64(logits))
        p /= p.sum()
        tok = int(rng.choice(p.size, p=p))
        tokens.append(tok)
        dists.append(p)
        drafter.append_drafted(st, tok)
    return tokens, dists


# ---------------------------------------------------------------------------
# verification


@dataclass(frozen=True)
class VerificationOutcome:
    accepted_path: tuple[int, ...]  # tree node indices along the accepted chain
    accepted_count: int
    bonus_token: int

    @property
    def tokens_appended(self) -> int:
        return self.accepted_count + 1


class _BlockForward:
    """Target forward over [pending token, tree tokens] with per-node
    gathered ancestor contexts."""

    def __init__(self, weights, snapshot, pending_token: int, tokens: list[int], parents: list[int]):
        cfg = weights.config
        vocab = cfg.vocab_size
        bad = [t for t in [pending_token] + list(tokens) if not 0 <= t < vocab]
        if bad:
            raise DimensionError(f"token id {bad[0]} outside vocabulary of size {vocab}")
        n_rows = 1 + len(tokens)
        L = cfg.layers
        base = snapshot.length
        self.taps = np.empty((n_rows, L + 1, cfg.embed), dtype=np.float32)
        self.k_cols = np.empty((n_rows, L, cfg.kv_embed), dtype=np.float32)
        self.v_cols = np.empty((n_rows, L, cfg.kv_embed), dtype=np.float32)
        self.logits = np.empty((n_rows, vocab), dtype=np.float32)
        paths = [[0]]  # block row indices contributing ancestor kv, root-first
        for i, par in enumerate(parents):
            parent_row = 0 if par == -1 else par + 1
            paths.append(paths[parent_row] + [i + 1])
        self.paths = paths
        block_tokens = [int(pending_token)] + [int(t) for t in tokens]
        for row in range(n_rows):
            anc = paths[row][:-1]
            contexts = []
            for l in range(L):
                ck = snapshot.cache.keys(l)
                cv = snapshot.cache.values(l)
                if anc:
                    ck = np.concatenate([ck, self.k_cols[anc, l]], axis=0)
                    cv = np.concatenate([cv, self.v_cols[anc, l]], axis=0)
                contexts.append((ck, cv))
            taps, k_col, v_col, logits = forward_token(
                weights, contexts, block_tokens[row], base + len(anc)
            )
            self.taps[row] = taps
            self.k_cols[row] = k_col
            self.v_cols[row] = v_col
            self.logits[row] = logits


def _commit_rows(snapshot, block: _BlockForward, rows: list[int], tokens: list[int]):
    snapshot.append_block(
        np.asarray(tokens, dtype=np.int64),
        np.swapaxes(block.taps[rows], 0, 1),
        np.swapaxes(block.k_cols[rows], 0, 1),
        np.swapaxes(block.v_cols[rows], 0, 1),
    )


def verify_greedy(weights, snapshot, pending_token: int, tree: DraftTree):
    """Single verification pass; commits the pending token plus every
    accepted node's cache column, then returns the outcome.

    The accepted path is the unique maximal root chain whose tokens all
    equal the target argmax given their ancestors; the bonus token is the
    argmax after the accepted path.
    """
    tree.validate()
    block = _BlockForward(weights, snapshot, pending_token, tree.tokens(), tree.parents())
    children: dict[int, list[int]] = {}
    for i, n in enumerate(tree.nodes):
        children.setdefault(n.parent, []).append(i)
    accepted: list[int] = []
    cur_row = 0
    cur_parent = -1
    while True:
        tgt = int(np.argmax(block.logits[cur_row]))
        match = next((i for i in children.get(cur_parent, []) if tree.nodes[i].token == tgt), None)
        if match is None:
            bonus = tgt
            break
        accepted.append(match)
        cur_parent = match
        cur_row = match + 1
    rows = [0] + [i + 1 for i in accepted]
    tokens = [pending_token] + [tree.nodes[i].token for i in accepted]
    _commit_rows(snapshot, block, rows, tokens)
    return VerificationOutcome(tuple(accepted), len(accepted), bonus)


def acceptance_prob(p: np.ndarray, q: np.ndarray, token: int) -> float:
    if q[token] <= 0.0:
        raise ContractError(f"drafted token {token} has zero proposal probability")
    return float(min(1.0, p[token] / q[token]))


def residual_distribution(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    res = np.maximum(p.astype(np.float64) - q.astype(np.float64), 0.0)
    total = res.sum()
    if total <= 1e-12:
        return p.astype(np.float64) / p.sum()
    return res / total


def _softmax64(logits: np.ndarray) -> np.ndarray:
    p = np.exp(_log_softmax64(logits))
    return p / p.sum()


def rejection_walk(p_dists, q_dists, chain_tokens, rng) -> tuple[list[int], int]:
    """The chain accept/reject core: token x_i survives with probability
    min(1, p(x_i)/q(x_i)); the first rejection draws the bonus from
    normalize(max(p - q, 0)); full acceptance draws it from the
    next-position target distribution p_dists[K]."""
    accepted: list[int] = []
    for i, tok in enumerate(chain_tokens):
        p = np.asarray(p_dists[i], dtype=np.float64)
        a = acceptance_prob(p, q_dists[i], tok)
        if rng.random() < a:
            accepted.append(i)
            continue
        res = residual_distribution(p, np.asarray(q_dists[i], dtype=np.float64))
        return accepted, int(rng.choice(res.size, p=res))
    p_next = np.asarray(p_dists[len(chain_tokens)], dtype=np.float64)
    return accepted, int(rng.choice(p_next.size, p=p_next / p_next.sum()))


def verify_sampling(weights, snapshot, pending_token: int, chain_tokens: list[int], q_dists, rng):
    """Leviathan-style chain rejection sampling against the target's exact
    per-position distributions; commits the accepted prefix."""
    block = _BlockForward(
        weights, snapshot, pending_token, list(chain_tokens), list(range(-1, len(chain_tokens) - 1))
    )
    p_dists = [_softmax64(block.logits[i]) for i in range(len(chain_tokens) + 1)]
    accepted, bonus = rejection_walk(p_dists, q_dists, chain_tokens, rng)
    rows = [0] + [i + 1 for i in accepted]
    tokens = [pending_token] + [chain_tokens[i] for i in accepted]
    _commit_rows(snapshot, block, rows, tokens)
    return VerificationOutcome(tuple(accepted), len(accepted), bonus)


# ---------------------------------------------------------------------------
# metrics


class MetricsLog:
    """Per-cycle records plus run totals; serializable as JSON lines."""

    def __init__(self):
        self.records: list[dict] = []
        self.target_calls = 0
        self.tokens_generated = 0
        self._accepted_sum = 0

    def record_cycle(self, drafted: int, accepted: int, tokens: int):
        self.target_calls += 1
        self.tokens_generated += tokens
        self._accepted_sum += accepted
        self.records.append(
            {
                "cycle": len(self.records),
                "drafted": drafted,
                "accepted": accepted,
                "calls": 1,
                "tokens": tokens,
                "tau_accept": self.tau_accept,
                "tau_per_call": self.tau_per_call,
            }
        )

    @property
    def cycles(self) -> int:
        return len(self.records)

    @property
    def tau_accept(self) -> float:
        return self._accepted_sum / max(1, self.cycles)

    @property
    def tau_per_call(self) -> float:
        return self.tokens_generated / max(1, self.cycles)

    def summary(self) -> dict:
        return {
            "cycle": "summary",
            "drafted": sum(r["drafted"] for r in self.records),
            "accepted": self._accepted_sum,
            "calls": self.target_calls,
            "tokens": self.tokens_generated,
            "tau_accept": self.tau_accept,
            "tau_per_call": self.tau_per_call,
        }

    def write_jsonl(self, path):
        with open(path, "w") as f:
            for rec in self.records:
                f.write(json.dumps(rec) + "\n")
            f.write(json.dumps(self.summary()) + "\n")


# ---------------------------------------------------------------------------
# the episode loop


@dataclass(frozen=True)
class ChainMode:
    k: int = 4


@dataclass(frozen=True)
class TreeMode:
    breadth: int = 8
    depth: int = 6
    budget: int = 62


def run_episode(
    target_weights,
    drafter,
    prompt: np.ndarray,
    mode,
    max_new: int,
    sampler=None,
    rng: np.random.Generator | None = None,
    metrics: MetricsLog | None = None,
):
    """Alternate drafting and verification until ``max_new`` tokens or the
    end-of-sequence token.  With a greedy sampler the committed output is
    bit-identical to vanilla greedy decoding regardless of drafter quality.

    Returns (generated tokens, MetricsLog).
    """
    cfg = target_weights.config
    sampler = sampler or GreedySampler()
    metrics = metrics or MetricsLog()
    stochastic = getattr(sampler, "stochastic", False)
    if stochastic and rng is None:
        raise ContractError("stochastic episodes need an rng")
    if stochastic and not isinstance(mode, ChainMode):
        raise ContractError("rejection sampling is implemented for chain drafting only")
    depth = mode.k if isinstance(mode, ChainMode) else mode.depth
    if len(prompt) + max_new + depth + 1 > cfg.max_seq:
        raise CapacityError(
            f"prompt {len(prompt)} + max_new {max_new} + draft depth {depth} exceeds max_seq {cfg.max_seq}"
        )
    if max_new <= 0:
        return np.empty(0, dtype=np.int64), metrics
    snapshot, logits = forward_full(target_weights, prompt)
    pending = int(sampler.select(logits[-1]))
    committed = [pending]
    payload = payload_rows(drafter.config, drafter.weights, target_weights, snapshot, 0, snapshot.length)
    drafter.lsa_calls += 1
    state = drafter.start(prompt, pending, payload)
    while len(committed) < max_new and committed[-1] != cfg.eos_token:
        if isinstance(mode, ChainMode):
            if stochastic:
                chain, q_dists = draft_chain_sampling(drafter, state, mode.k, rng)
                drafted = len(chain)
                old_len = snapshot.length
                outcome = verify_sampling(target_weights, snapshot, pending, chain, q_dists, rng)
                new_tokens = [chain[i] for i in outcome.accepted_path] + [outcome.bonus_token]
            else:
                tree = build_tree(drafter, state, 1, mode.k, mode.k)
                drafted = len(tree.nodes)
                old_len = snapshot.length
                outcome = verify_greedy(target_weights, snapshot, pending, tree)
                new_tokens = [tree.nodes[i].token for i in outcome.accepted_path] + [outcome.bonus_token]
        else:
            tree = build_tree(drafter, state, mode.breadth, mode.depth, mode.budget)
            drafted = len(tree.nodes)
            old_len = snapshot.length
            outcome = verify_greedy(target_weights, snapshot, pending, tree)
            new_tokens = [tree.nodes[i].token for i in outcome.accepted_path] + [outcome.bonus_token]
        remaining = max_new - len(committed)
        clipped = new_tokens[:remaining]
        if cfg.eos_token in clipped:
            clipped = clipped[: clipped.index(cfg.eos_token) + 1]
        committed.extend(clipped)
        metrics.record_cycle(
            drafted=drafted,
            accepted=min(outcome.accepted_count, max(0, len(clipped) - 1)),
            tokens=len(clipped),
        )
        if len(committed) >= max_new or committed[-1] == cfg.eos_token:
            break
        payload = payload_rows(
            drafter.config, drafter.weights, target_weights, snapshot, old_len, snapshot.length
        )
        drafter.lsa_calls += 1
        drafter.observe_commit(state, new_tokens, payload)
        pending = int(outcome.bonus_token)
    return np.asarray(committed[:max_new], dtype=np.int64), metrics
