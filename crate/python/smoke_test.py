"""Smoke test for the reciperec extension module.

Build and install first, e.g. `pip install --no-build-isolation ./crates/python`
or `maturin develop -m crates/python/Cargo.toml`, then run this script.
"""

import math
import tempfile
from pathlib import Path

import reciperec


def main():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        data = tmp / "data"
        counts = reciperec.generate_synthetic(str(data), users=30, recipes=150, seed=4)
        assert list(counts) == [30, 150, 30], counts

        g = reciperec.Graph.load(str(data))
        assert dict(g.counts()) == {"user": 30, "recipe": 150, "ingredient": 30}
        assert g.edge_count("user-recipe") > 0
        for j, _ in g.neighbors("recipe", 0, "recipe-recipe"):
            assert any(i == 0 for i, _ in g.neighbors("recipe", j, "recipe-recipe"))

        cfg = reciperec.TrainConfig(epochs=2, hidden=16, heads=2, settf_heads=2, mlp_hidden=16)
        assert cfg.to_dict()["hidden"] == 16
        try:
            reciperec.TrainConfig(lam=1.0)
        except ValueError:
            pass
        else:
            raise AssertionError("unknown config field accepted")

        out = tmp / "run"
        manifest = reciperec.train(cfg, str(data), str(out))
        assert len(manifest["trace"]) == 2
        assert all(math.isfinite(e["mean_loss"]) for e in manifest["trace"])
        hr10 = manifest["final_report"]["at_k"][9]["hr"]
        assert 0.0 <= hr10 <= 1.0

        report = reciperec.evaluate(str(out / "checkpoint.bin"), str(data), str(out / "split.json"))
        assert report == manifest["final_report"]

        model = reciperec.Model.from_checkpoint(str(out / "checkpoint.bin"), str(data), str(out / "split.json"))
        users = model.embeddings("user")
        assert len(users) == 30 and len(users[0]) == 16
        scores = model.score(0, [0, 1, 2])
        assert len(scores) == 3 and all(math.isfinite(s) for s in scores)

        assert reciperec.rank_of(7, [3, 7, 9], [0.5, 0.5, 0.1]) == 2
        pre, hr, ndcg, map_ = reciperec.metrics_from_ranks([3], k=5)
        assert (pre, hr) == (0.2, 1.0) and abs(ndcg - 0.5) < 1e-15 and abs(map_ - 1 / 3) < 1e-15

        ok, text = reciperec.self_check()
        assert ok, text

    print(f"reciperec {reciperec.__version__} smoke test passed (HR@10 after 2 epochs: {hr10:.3f})")


if __name__ == "__main__":
    main()
