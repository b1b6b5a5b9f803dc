"""Client/server speculative-decoding sessions.

The client hosts the drafter; the server hosts the target model plus the
layer-self-attention weights and ships each cycle's accepted tokens with
the activation payload the drafter variant needs.  Messages travel inside
a 1-byte alternating-bit envelope (outside the accounted message bytes);
every data frame is acknowledged and retransmitted on a 200 ms virtual
timeout, which keeps sessions live under lossy channels.

On a disconnection after B committed tokens the client finishes the
response purely with the drafter: self-attention plus cross-attention over
the aggregated store it already holds (and, for n > 0, the frozen-layer
cache columns received so far), making zero further network calls.
"""

from __future__ import annotations

import socket
import struct
import threading
from dataclasses import dataclass, field

import numpy as np

from ..drafters import payload_rows
from ..errors import ProtocolError, SessionError
from ..speculation import DraftTree, TreeNode, build_tree, verify_greedy
from ..target import forward_full
from .netsim import BUILTIN_PROFILES, Channel, EventLoop, NetworkProfile
from .wire import (
    MSG_ACK,
    MSG_BOOTSTRAP,
    MSG_DRAFT,
    MSG_VERIFY,
    decode_ack,
    decode_bootstrap,
    decode_draft,
    decode_verify,
    encode_ack,
    encode_bootstrap,
    encode_draft,
    encode_verify,
    payload_elements,
)

ACK_TIMEOUT_MS = 200.0
MAX_RETRIES = 60


@dataclass
class SessionMetrics:
    bytes_up: int = 0  # draft frames
    bytes_down: int = 0  # verify + bootstrap frames
    ack_bytes: int = 0
    target_calls: int = 0
    committed: int = 0
    cut_point: int | None = None
    continuation_len: int = 0
    virtual_time_ms: float = 0.0
    retransmissions: int = 0
    client_calls_after_cut: int = 0
    draft_nodes: list = field(default_factory=list)
    down_elements: list = field(default_factory=list)
    up_bytes_per_cycle: list = field(default_factory=list)

    def overhead_ms_per_token(self) -> float:
        return self.virtual_time_ms / max(1, self.committed)


class _ArqEndpoint:
    """Alternating-bit sender/receiver over one duplex channel pair."""

    def __init__(self, loop: EventLoop, out_channel: Channel, metrics: SessionMetrics):
        self.loop = loop
        self.out = out_channel
        self.metrics = metrics
        self.send_bit = 0
        self.recv_bit = 0
        self._pending: tuple[bytes, int] | None = None  # (framed bytes, retries)
        self._timer: int | None = None
        self.deliver_to = None  # the peer's on_frame
        self.alive = True

    def send_data(self, message: bytes):
        if self._pending is not None:
            raise SessionError("protocol violation: data sent while previous frame unacked")
        framed = bytes([self.send_bit]) + message
        self._pending = (framed, 0)
        self._transmit()

    def _transmit(self):
        framed, retries = self._pending
        if retries > MAX_RETRIES:
            self.alive = False  # give up (e.g. the peer disconnected)
            self._pending = None
            self._timer = None
            return
        self._pending = (framed, retries + 1)
        if retries:
            self.metrics.retransmissions += 1
        self.out.send(framed, self.deliver_to)
        self._timer = self.loop.schedule(ACK_TIMEOUT_MS, self._on_timeout)

    def _on_timeout(self):
        if self._pending is not None:
            self._transmit()

    def send_ack(self, bit: int):
        frame = bytes([2]) + encode_ack(bit)  # envelope 2 marks control frames
        self.metrics.ack_bytes += 2
        self.out.send(frame, self.deliver_to)

    def _mark_acked(self):
        if self._pending is not None:
            self._pending = None
            if self._timer is not None:
                self.loop.cancel(self._timer)
                self._timer = None
            self.send_bit ^= 1

    def on_frame(self, framed: bytes, handle_data):
        kind = framed[0]
        if kind == 2:
            seq = decode_ack(framed[1:])
            if self._pending is not None and seq == self.send_bit:
                self._mark_acked()
            return
        bit, message = kind, framed[1:]
        if bit != self.recv_bit:
            self.send_ack(bit)  # duplicate: re-ack, do not reprocess
            return
        # fresh data from the peer implies it received my outstanding frame
        # (the alternating protocol only progresses on receipt), even if the
        # explicit ack was lost
        self._mark_acked()
        self.send_ack(bit)
        self.recv_bit ^= 1
        handle_data(message)

    def shutdown(self):
        self.alive = False
        if self._timer is not None:
            self.loop.cancel(self._timer)
            self._timer = None
        self._pending = None


class ServerSession:
    """Holds the target snapshot; answers drafts with verification results."""

    def __init__(self, target_weights, drafter_config, drafter_weights, prompt, tree_depth: int):
        self.target = target_weights
        self.dcfg = drafter_config
        self.dweights = drafter_weights
        self.tree_depth = tree_depth
        self.snapshot, logits = forward_full(target_weights, prompt)
        self.pending = int(np.argmax(logits[-1]))
        self.verify_count = 0
        self.lsa_calls = 0
        self.cycle_stats: list[tuple[int, int]] = []  # (token count A, payload elements)

    def bootstrap_message(self) -> bytes:
        payload = payload_rows(
            self.dcfg, self.dweights, self.target, self.snapshot, 0, self.snapshot.length
        )
        self.lsa_calls += 1
        self.bootstrap_elements = payload_elements(payload)
        return encode_bootstrap(self.pending, payload)

    @property
    def verified_len(self) -> int:
        return self.snapshot.length + 1  # committed tokens include the pending one

    def on_draft(self, message: bytes) -> bytes:
        tokens, parents = decode_draft(message)
        depth_of = {}
        nodes = []
        for i, (tok, par) in enumerate(zip(tokens, parents)):
            depth = 1 if par == -1 else depth_of[par] + 1
            depth_of[i] = depth
            nodes.append(TreeNode(tok, par, depth, 0.0, 0.0))
        tree = DraftTree(nodes, breadth=max(1, len(nodes)), depth=self.tree_depth, budget=max(1, len(nodes)))
        old_len = self.snapshot.length
        outcome = verify_greedy(self.target, self.snapshot, self.pending, tree)
        self.verify_count += 1
        accepted_tokens = [tree.nodes[i].token for i in outcome.accepted_path]
        payload = payload_rows(
            self.dcfg, self.dweights, self.target, self.snapshot, old_len, self.snapshot.length
        )
        self.lsa_calls += 1
        self.pending = outcome.bonus_token
        tokens_out = accepted_tokens + [outcome.bonus_token]
        self.cycle_stats.append((len(tokens_out), payload_elements(payload)))
        return encode_verify(tokens_out, payload)


class ClientSession:
    """Hosts the drafter; commits tokens as verifications arrive."""

    def __init__(self, drafter, prompt, tree_mode, max_new: int, disconnect_after: int | None):
        self.drafter = drafter
        self.prompt = np.asarray(prompt, dtype=np.int64)
        self.mode = tree_mode
        self.max_new = max_new
        self.disconnect_after = disconnect_after
        self.state = None
        self.committed: list[int] = []
        self.done = False
        self.disconnected = False
        self.on_disconnect = None  # set by the runner

    @property
    def verified_len(self) -> int:
        return len(self.prompt) + len(self.committed)

    def _eos(self) -> int:
        return self.drafter.target.config.eos_token

    def on_bootstrap(self, message: bytes) -> bytes | None:
        tc = self.drafter.target.config
        first, payload = decode_bootstrap(
            message,
            len(self.prompt),
            self.drafter.config.variant,
            self.drafter.config.n,
            tc.kv_embed,
            tc.embed,
            self.drafter.config.use_lsa,
        )
        self.state = self.drafter.start(self.prompt, first, payload)
        self.committed.append(first)
        if self._check_stop():
            return None
        return self._make_draft()

    def _check_stop(self) -> bool:
        if len(self.committed) >= self.max_new or (self.committed and self.committed[-1] == self._eos()):
            self.done = True
            return True
        if self.disconnect_after is not None and len(self.committed) >= self.disconnect_after:
            self.disconnected = True
            if self.on_disconnect:
                self.on_disconnect()
            self._continue_locally()
            return True
        return False

    def _make_draft(self) -> bytes:
        if isinstance(self.mode, tuple):
            breadth, depth, budget = self.mode
        else:
            breadth, depth, budget = self.mode.breadth, self.mode.depth, self.mode.budget
        self._tree = build_tree(self.drafter, self.state, breadth, depth, budget)
        return encode_draft(self._tree.tokens(), self._tree.parents())

    def on_verify(self, message: bytes) -> bytes | None:
        tc = self.drafter.target.config
        tokens, payload = decode_verify(
            message,
            self.drafter.config.variant,
            self.drafter.config.n,
            tc.kv_embed,
            tc.embed,
            self.drafter.config.use_lsa,
        )
        remaining = self.max_new - len(self.committed)
        clipped = tokens[:remaining]
        if self._eos() in clipped:
            clipped = clipped[: clipped.index(self._eos()) + 1]
        self.committed.extend(clipped)
        if len(clipped) == len(tokens):
            self.drafter.observe_commit(self.state, tokens, payload)
        if self._check_stop():
            return None
        return self._make_draft()

    def _continue_locally(self):
        """Pure-drafter continuation after the link is gone."""
        start = len(self.committed)
        eos = self._eos()
        while len(self.committed) < self.max_new and (not self.committed or self.committed[-1] != eos):
            logits = self.drafter.draft_next(self.state)
            tok = int(np.argmax(logits))
            self.committed.append(tok)
            self.drafter.append_drafted(self.state, tok)
        self.continuation_len = len(self.committed) - start
        self.done = True


def standalone_continuation(drafter, state, committed: list[int], max_new: int) -> list[int]:
    """The oracle the disconnection fallback must match bit-for-bit: greedy
    generation from the given drafter state."""
    out = list(committed)
    eos = drafter.target.config.eos_token
    while len(out) < max_new and (not out or out[-1] != eos):
        logits = drafter.draft_next(state)
        tok = int(np.argmax(logits))
        out.append(tok)
        drafter.append_drafted(state, tok)
    return out


def run_session(
    target_weights,
    drafter,
    prompt,
    tree_mode,
    max_new: int,
    profile: NetworkProfile | str = "ideal",
    network_seed: int = 0,
    disconnect_after: int | None = None,
):
    """Simulate one client-server episode on the virtual clock.

    Returns (committed tokens, SessionMetrics).
    """
    if isinstance(profile, str):
        profile = BUILTIN_PROFILES[profile]
    loop = EventLoop()
    rng = np.random.default_rng(network_seed)
    metrics = SessionMetrics()
    up = Channel(loop, profile, rng)  # client -> server
    down = Channel(loop, profile, rng)  # server -> client
    depth = tree_mode.depth if hasattr(tree_mode, "depth") else tree_mode[1]
    server = ServerSession(target_weights, drafter.config, drafter.weights, prompt, depth)
    client = ClientSession(drafter, prompt, tree_mode, max_new, disconnect_after)

    server_ep = _ArqEndpoint(loop, down, metrics)
    client_ep = _ArqEndpoint(loop, up, metrics)

    def client_handles(message: bytes):
        if client.disconnected:
            metrics.client_calls_after_cut += 1
            return
        if message[0] == MSG_BOOTSTRAP:
            reply = client.on_bootstrap(message)
        elif message[0] == MSG_VERIFY:
            reply = client.on_verify(message)
        else:
            raise ProtocolError(f"client got unexpected frame type {message[0]}")
        if client.verified_len != server.verified_len and not client.disconnected and not client.done:
            raise SessionError(
                f"verified_len diverged: client {client.verified_len}, server {server.verified_len}"
            )
        if reply is not None:
            if client.disconnected:
                metrics.client_calls_after_cut += 1
                return
            metrics.bytes_up += len(reply)
            metrics.up_bytes_per_cycle.append(len(reply))
            metrics.draft_nodes.append(reply[1])
            client_ep.send_data(reply)

    def server_handles(message: bytes):
        if message[0] != MSG_DRAFT:
            raise ProtocolError(f"server got unexpected frame type {message[0]}")
        reply = server.on_draft(message)
        metrics.target_calls += 1
        metrics.bytes_down += len(reply)
        metrics.down_elements.append(server.cycle_stats[-1])
        server_ep.send_data(reply)

    server_ep.deliver_to = lambda framed: client_ep.on_frame(framed, client_handles)
    client_ep.deliver_to = lambda framed: server_ep.on_frame(framed, server_handles)

    def cut_link():
        metrics.cut_point = len(client.committed)
        up.close()
        down.close()
        server_ep.shutdown()

    client.on_disconnect = cut_link

    boot = server.bootstrap_message()
    metrics.bytes_down += len(boot)
    server_ep.send_data(boot)
    loop.run()
    if not client.done:
        raise SessionError("session ended without completing the generation")
    metrics.committed = len(client.committed)
    metrics.continuation_len = getattr(client, "continuation_len", 0)
    metrics.virtual_time_ms = loop.now_ms
    return np.asarray(client.committed[:max_new], dtype=np.int64), metrics


# ---------------------------------------------------------------------------
# real stream-socket transport (smoke use only: identical frames, no timing)


def _send_frame(sock: socket.socket, message: bytes):
    sock.sendall(struct.pack("<I", len(message)) + message)


def _recv_frame(sock: socket.socket) -> bytes:
    header = _recv_exact(sock, 4)
    (length,) = struct.unpack("<I", header)
    return _recv_exact(sock, length)


def _recv_exact(sock: socket.socket, count: int) -> bytes:
    buf = b""
    while len(buf) < count:
        chunk = sock.recv(count - len(buf))
        if not chunk:
            raise ProtocolError("socket closed mid-frame")
        buf += chunk
    return buf


def run_session_socket(target_weights, drafter, prompt, tree_mode, max_new: int):
    """One session over a localhost TCP socket with the same frames."""
    depth = tree_mode.depth if hasattr(tree_mode, "depth") else tree_mode[1]
    server = ServerSession(target_weights, drafter.config, drafter.weights, prompt, depth)
    client = ClientSession(drafter, prompt, tree_mode, max_new, disconnect_after=None)
    listener = socket.socket()
    listener.bind(("127.0.0.1", 0))
    listener.listen(1)
    port = listener.getsockname()[1]

    def serve():
        conn, _ = listener.accept()
        with conn:
            _send_frame(conn, server.bootstrap_message())
            while True:
                try:
                    frame = _recv_frame(conn)
                except ProtocolError:
                    return
                _send_frame(conn, server.on_draft(frame))

    thread = threading.Thread(target=serve, daemon=True)
    thread.start()
    sock = socket.create_connection(("127.0.0.1", port))
    with sock:
        reply = client.on_bootstrap(_recv_frame(sock))
        while reply is not None:
            _send_frame(sock, reply)
            reply = client.on_verify(_recv_frame(sock))
    listener.close()
    thread.join(timeout=5)
    return np.asarray(client.committed[:max_new], dtype=np.int64)
