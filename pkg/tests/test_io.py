import json
import struct

import numpy as np
import pytest

from longmix.io import (
    PROB_MAGIC,
    param_columns,
    read_chain,
    read_manifest,
    read_prob_tensor,
    vech_pairs,
    write_chain,
    write_params_csv,
    write_prob_tensor,
)
from longmix.sampler import McmcConfig, run_chain
from longmix.simulate import preset, simulate_dataset


@pytest.fixture(scope="module")
def fitted():
    ds, _ = simulate_dataset(preset("k2-normal", sizes=(8, 6), seed=4))
    chain = run_chain(ds, 2, None, McmcConfig(keep=15, thin=1, burnin=5, seed=2))
    chain.names = {"random": [f"b{j + 1}" for j in range(5)], "fixed": ["spiders:time"],
                   "markers": ["lbili", "platelet", "spiders"]}
    return ds, chain


class TestProbTensor:
    def test_round_trip(self, tmp_path, rng):
        P = rng.dirichlet(np.ones(3), size=(7, 11)).transpose(0, 2, 1)
        write_prob_tensor(tmp_path / "p.bin", P)
        Q = read_prob_tensor(tmp_path / "p.bin")
        assert Q.shape == (7, 3, 11)
        assert Q.tobytes() == np.ascontiguousarray(P).tobytes()

    def test_header_layout(self, tmp_path):
        write_prob_tensor(tmp_path / "p.bin", np.zeros((2, 3, 4)))
        raw = (tmp_path / "p.bin").read_bytes()
        assert raw[:4] == PROB_MAGIC
        assert len(raw) == 16 + 2 * 3 * 4 * 8
        assert struct.unpack("<HIHI", raw[4:16]) == (1, 2, 3, 4)

    def test_bad_magic(self, tmp_path):
        write_prob_tensor(tmp_path / "p.bin", np.zeros((1, 1, 1)))
        raw = bytearray((tmp_path / "p.bin").read_bytes())
        raw[:4] = b"XXXX"
        (tmp_path / "p.bin").write_bytes(bytes(raw))
        with pytest.raises(ValueError, match="magic"):
            read_prob_tensor(tmp_path / "p.bin")

    def test_bad_version(self, tmp_path):
        write_prob_tensor(tmp_path / "p.bin", np.zeros((1, 1, 1)))
        raw = bytearray((tmp_path / "p.bin").read_bytes())
        raw[4:6] = struct.pack("<H", 9)
        (tmp_path / "p.bin").write_bytes(bytes(raw))
        with pytest.raises(ValueError, match="version"):
            read_prob_tensor(tmp_path / "p.bin")

    def test_truncated(self, tmp_path):
        write_prob_tensor(tmp_path / "p.bin", np.zeros((2, 2, 2)))
        raw = (tmp_path / "p.bin").read_bytes()
        (tmp_path / "short.bin").write_bytes(raw[:10])
        (tmp_path / "body.bin").write_bytes(raw[:-8])
        with pytest.raises(ValueError, match="header"):
            read_prob_tensor(tmp_path / "short.bin")
        with pytest.raises(ValueError, match="expected 8"):
            read_prob_tensor(tmp_path / "body.bin")


class TestChainFiles:
    def test_vech_order(self):
        assert vech_pairs(3) == [(0, 0), (1, 0), (2, 0), (1, 1), (2, 1), (2, 2)]

    def test_columns(self, fitted):
        _, chain = fitted
        cols = param_columns(chain)
        per_comp = 1 + 5 + 15
        assert len(cols) == 2 * per_comp + 1 + 1 + 5
        assert cols[:3] == ["w[1]", "mu[1][b1]", "mu[1][b2]"]
        assert "D[2][b2;b1]" in cols and "phi[lbili]" in cols
        assert "phi[platelet]" not in cols and cols[-1] == "xi[b5]"

    def test_round_trip(self, fitted, tmp_path):
        _, chain = fitted
        write_chain(chain, tmp_path / "fit")
        back = read_chain(tmp_path / "fit")
        for f in ("w", "mu", "D", "alpha", "xi"):
            np.testing.assert_array_equal(getattr(back, f), getattr(chain, f))
        np.testing.assert_array_equal(back.phi[:, 0], chain.phi[:, 0])
        assert np.all(np.isnan(back.phi[:, 1:]))
        np.testing.assert_array_equal(back.allocprob, chain.allocprob)
        assert back.config == chain.config
        assert back.prior.to_dict() == chain.prior.to_dict()

    def test_rewrite_is_byte_identical(self, fitted, tmp_path):
        _, chain = fitted
        write_chain(chain, tmp_path / "a")
        write_params_csv(tmp_path / "b.csv", read_chain(tmp_path / "a"))
        assert (tmp_path / "a" / "params.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_manifest(self, fitted, tmp_path):
        ds, chain = fitted
        (tmp_path / "data.csv").write_text("x\n")
        write_chain(chain, tmp_path / "fit", data_path=tmp_path / "data.csv", extra={"note": 1})
        man = read_manifest(tmp_path / "fit")
        assert man["K"] == 2 and man["N"] == ds.N and man["draws"] == 15
        assert man["seed"] == 2 and man["config"]["keep"] == 15
        assert len(man["data"]["sha256"]) == 64 and man["note"] == 1
        # strict JSON: no NaN or Infinity literals
        json.loads((tmp_path / "fit" / "manifest.json").read_text(), parse_constant=pytest.fail)
