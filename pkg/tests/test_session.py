import numpy as np
import pytest

from specdec.drafters import DrafterConfig, build_drafter, init_drafter_weights
from specdec.errors import SessionError
from specdec.speculation import ChainMode, TreeMode, run_episode
from specdec.target import GreedySampler, ModelConfig, init_model, vanilla_decode
from specdec.transport.netsim import BUILTIN_PROFILES, NetworkProfile
from specdec.transport.session import (
    ClientSession,
    ServerSession,
    run_session,
    run_session_socket,
    standalone_continuation,
)
from specdec.transport.wire import expected_verify_elements

TCFG = ModelConfig(vocab_size=32, layers=3, embed=32, kv_embed=16, heads=2, mlp_hidden=64, max_seq=128)
TREE = TreeMode(2, 3, 6)


@pytest.fixture(scope="module")
def target():
    return init_model(TCFG, seed=31)


def make_drafter(target, variant="moa", n=0, seed=4, **kw):
    cfg = DrafterConfig(
        variant=variant, n=n, heads=2, lsa_kv=8, lsa_mlp=32, sa_kv=8, sa_mlp=32, ca_kv=8, ca_mlp=32, **kw
    )
    w = init_drafter_weights(cfg, target.config, seed)
    return build_drafter(cfg, w, target)


PROMPTS = [np.array([3, 5, 7]), np.array([2, 9, 4, 11, 6]), np.array([8, 1, 13, 2])]


class TestTransparency:
    @pytest.mark.parametrize("variant,n", [("moa", 0), ("moa", 1), ("moa", 3), ("eagle", 0), ("independent", 0)])
    def test_session_equals_single_device(self, target, variant, n):
        d = make_drafter(target, variant, n)
        for prompt in PROMPTS:
            want = vanilla_decode(target, prompt, GreedySampler(), 14)
            got, metrics = run_session(target, d, prompt, TREE, max_new=14, profile="ideal")
            assert np.array_equal(got, want)
            assert metrics.client_calls_after_cut == 0

    def test_transparency_under_delays_and_drops(self, target):
        d = make_drafter(target, "moa", 1)
        prompt = PROMPTS[0]
        want = vanilla_decode(target, prompt, GreedySampler(), 12)
        for seed in range(6):
            got, metrics = run_session(
                target, d, prompt, TREE, max_new=12, profile="4g", network_seed=seed
            )
            assert np.array_equal(got, want)

    def test_quantization_noise_cannot_corrupt_output(self, target):
        # the drafter consumes lossy activations, yet verification happens on
        # exact server-side state: committed tokens stay bit-identical
        d = make_drafter(target, "eagle", 0)
        prompt = PROMPTS[1]
        want = vanilla_decode(target, prompt, GreedySampler(), 16)
        got, _ = run_session(target, d, prompt, TREE, max_new=16, profile="5g", network_seed=1)
        assert np.array_equal(got, want)


class TestByteAccounting:
    @pytest.mark.parametrize("variant,n", [("moa", 0), ("moa", 2), ("eagle", 0), ("independent", 0)])
    def test_formula_conformance(self, target, variant, n):
        d = make_drafter(target, variant, n)
        _, metrics = run_session(target, d, PROMPTS[0], TREE, max_new=12, profile="ideal")
        for (a, elements), m in zip(metrics.down_elements, metrics.draft_nodes):
            assert elements == expected_verify_elements(variant, n, a, TCFG.kv_embed, TCFG.embed)
        for m, size in zip(metrics.draft_nodes, metrics.up_bytes_per_cycle):
            assert size == 2 + 4 * m

    def test_session_metrics_accounting(self, target):
        d = make_drafter(target, "independent", 0)
        got, metrics = run_session(target, d, PROMPTS[2], TREE, max_new=10, profile="ideal")
        assert metrics.bytes_up == sum(metrics.up_bytes_per_cycle)
        assert metrics.target_calls == len(metrics.down_elements)
        assert metrics.committed == len(got)


class TestDisconnection:
    @pytest.mark.parametrize("cut", [1, 5])
    @pytest.mark.parametrize("variant,n", [("moa", 0), ("moa", 2), ("eagle", 0), ("independent", 0)])
    def test_continuation_matches_standalone_oracle(self, target, variant, n, cut):
        d = make_drafter(target, variant, n)
        prompt = PROMPTS[0]
        max_new = 16
        got, metrics = run_session(
            target, d, prompt, TREE, max_new=max_new, profile="ideal", disconnect_after=cut
        )
        assert metrics.cut_point is not None and metrics.cut_point >= cut
        assert metrics.client_calls_after_cut == 0
        # oracle: drive the exchange directly (no network) to the same cut,
        # then generate standalone from that state
        server = ServerSession(target, d.config, d.weights, prompt, TREE.depth)
        client = ClientSession(d, prompt, TREE, max_new, disconnect_after=None)
        reply = client.on_bootstrap(server.bootstrap_message())
        while reply is not None and len(client.committed) < metrics.cut_point:
            reply = client.on_verify(server.on_draft(reply))
        want = standalone_continuation(d, client.state, client.committed, max_new)
        assert np.array_equal(got, np.asarray(want[:max_new]))

    def test_cut_point_annotated(self, target):
        d = make_drafter(target, "independent", 0)
        got, metrics = run_session(
            target, d, PROMPTS[1], TREE, max_new=12, profile="ideal", disconnect_after=3
        )
        assert metrics.cut_point >= 3
        assert metrics.continuation_len == len(got) - metrics.cut_point


class TestLiveness:
    def test_thousand_lossy_sessions_terminate(self, target):
        d = make_drafter(target, "independent", 0)
        prompt = np.array([4, 6])
        lossy = NetworkProfile("lossy", 2.0, 1.0, 0.001)
        want = vanilla_decode(target, prompt, GreedySampler(), 6)
        for seed in range(1000):
            got, _ = run_session(
                target, d, prompt, TreeMode(2, 2, 4), max_new=6, profile=lossy, network_seed=seed
            )
            assert np.array_equal(got, want)

    def test_verified_len_divergence_detected(self, target):
        d = make_drafter(target, "independent", 0)
        server = ServerSession(target, d.config, d.weights, PROMPTS[0], TREE.depth)
        client = ClientSession(d, PROMPTS[0], TREE, 10, None)
        client.on_bootstrap(server.bootstrap_message())
        assert client.verified_len == server.verified_len


class TestSocketTransport:
    def test_socket_smoke_matches_vanilla(self, target):
        d = make_drafter(target, "moa", 1)
        prompt = PROMPTS[0]
        want = vanilla_decode(target, prompt, GreedySampler(), 10)
        got = run_session_socket(target, d, prompt, TREE, max_new=10)
        assert np.array_equal(got, want)
