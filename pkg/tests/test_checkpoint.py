import numpy as np
import pytest

from catprior import checkpoint as ck
from catprior.errors import DataError, UsageError
from catprior.imitation import ImitationPolicy
from catprior.nn import AdamState, ParamSet
from catprior.prior import PseudoCountTable, count_and_reward
from catprior.upper import League


def full_bundle(rng):
    pol = ImitationPolicy.init(5, 4, 3, 6, 3, (8,), rng)
    pol.obs_shift = rng.normal(size=9)
    pol.obs_scale = rng.uniform(0.5, 2, size=9)
    comps = ck.imitation_components(pol)
    comps["optimizer"] = ck.adam_component({"decoder": AdamState.for_arrays(pol.decoder.arrays(), 1e-3)})
    return ck.Bundle("imitation", comps, "abc", {"imitation.k": "6"}, {"steps": 10}), pol


class TestRoundTrip:
    def test_save_load_save_identical(self, tmp_path, rng):
        b, _ = full_bundle(rng)
        h1 = ck.save(b, tmp_path / "a.ckpt")
        h2 = ck.save(ck.load(tmp_path / "a.ckpt"), tmp_path / "b.ckpt")
        assert h1 == h2
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_policy_exact(self, rng):
        b, pol = full_bundle(rng)
        back = ck.imitation_from(ck.loads(ck.dumps(b)))
        for a, c in zip(pol.encoder.arrays() + pol.decoder.arrays(), back.encoder.arrays() + back.decoder.arrays()):
            np.testing.assert_array_equal(a, c)
        np.testing.assert_array_equal(pol.obs_scale, back.obs_scale)
        obs = rng.normal(size=(4, 9))
        np.testing.assert_array_equal(pol.act(obs, rng, deterministic=True)["action"],
                                      back.act(obs, rng, deterministic=True)["action"])

    def test_decoder_only(self, rng):
        b, pol = full_bundle(rng)
        part = ck.loads(ck.dumps(b), ["codebook", "decoder", "head"])
        assert set(part.components) == {"codebook", "decoder", "head"}
        back = ck.imitation_from(part)
        assert back.encoder is None
        state = rng.normal(size=(3, 5))
        np.testing.assert_array_equal(pol.decode_mean(state, np.array([0, 2, 5])),
                                      back.decode_mean(state, np.array([0, 2, 5])))

    def test_adam_state(self, rng):
        p = ParamSet.init([3, 4, 2], rng)
        s = AdamState.for_arrays(p.arrays(), 1e-3)
        s.m[0] += 1.5
        s.step = 7
        back = ck.adam_from(ck.adam_component({"g": s}))["g"]
        assert back.step == 7
        np.testing.assert_array_equal(back.m[0], s.m[0])

    def test_count_table(self):
        t = PseudoCountTable(5, window=3)
        for i in (0, 1, 1, 4):
            count_and_reward(t, i)
        back = ck.count_table_from(ck.loads(ck.dumps(ck.Bundle("t", {"c": ck.count_table_component(t)})))
                                   .components["c"])
        np.testing.assert_array_equal(back.counts, t.counts)
        assert list(back.ring) == list(t.ring)
        assert back.consistent()

    def test_league(self, rng):
        lg = League()
        lg.add(ParamSet.init([2, 3], rng), 0)
        lg.add(ParamSet.init([2, 3], rng), 4)
        lg.win_prob[1] = 0.7
        back = ck.league_from(ck.loads(ck.dumps(ck.Bundle("compete", ck.league_components(lg)))))
        assert back.win_prob == lg.win_prob
        assert back.added_at == [0, 4]
        np.testing.assert_array_equal(back.pool[1].weights[0], lg.pool[1].weights[0])


class TestCorruption:
    def test_flipped_byte(self, rng):
        data = bytearray(ck.dumps(full_bundle(rng)[0]))
        data[-20] ^= 0xFF
        with pytest.raises(DataError, match="hash mismatch"):
            ck.loads(bytes(data))

    def test_version_mismatch_names_both(self, rng):
        data = ck.dumps(full_bundle(rng)[0]).replace(b"catprior-checkpoint 1", b"catprior-checkpoint 7", 1)
        with pytest.raises(DataError, match="version 7.*version 1"):
            ck.loads(data)

    def test_truncated(self, rng):
        with pytest.raises(DataError):
            ck.loads(ck.dumps(full_bundle(rng)[0])[:-5])

    def test_not_a_bundle(self):
        with pytest.raises(DataError):
            ck.loads(b"hello world")

    def test_unknown_component(self, rng):
        with pytest.raises(UsageError, match="available"):
            ck.loads(ck.dumps(full_bundle(rng)[0]), ["prior"])

    def test_missing_file(self, tmp_path):
        with pytest.raises(UsageError):
            ck.load(tmp_path / "none.ckpt")

    def test_structural_conflict(self, rng):
        b = full_bundle(rng)[0]
        ck.check_structural(b, {"imitation.k": "6", "other": "x"}, "stage")
        with pytest.raises(UsageError, match="imitation.k"):
            ck.check_structural(b, {"imitation.k": "32"}, "stage")
