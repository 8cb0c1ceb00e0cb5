"""Smoke test for the stepsrl Python extension.

Build the extension first:

    cargo build --release -p stepsrl-python

then run `python3 python/smoke_test.py`. The shared library is copied into a
temporary directory as `stepsrl.so` and imported from there.
"""

import json
import math
import os
import shutil
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def import_extension(work):
    lib = os.environ.get("STEPSRL_PYLIB", os.path.join(ROOT, "target", "release", "libstepsrl.so"))
    if not os.path.exists(lib):
        sys.exit(f"extension not found at {lib}; run cargo build --release -p stepsrl-python")
    shutil.copy(lib, os.path.join(work, "stepsrl.so"))
    sys.path.insert(0, work)
    import stepsrl

    return stepsrl


def main():
    work = tempfile.mkdtemp(prefix="stepsrl-smoke-")
    try:
        st = import_extension(work)

        t = st.Tensor([2, 3], [1, 2, 3, 4, 5, 6])
        eye = st.Tensor([3, 3], [1, 0, 0, 0, 1, 0, 0, 0, 1])
        assert t.matmul(eye).tolist() == [[1, 2, 3], [4, 5, 6]]

        tone = [int(8000 * math.sin(2 * math.pi * 440 * i / 16000)) for i in range(1600)]
        feats = st.mfcc(tone, 13)
        assert feats.shape == [8, 13], feats.shape
        assert all(math.isfinite(v) for v in feats.data)

        _, alpha = st.entangle(st.Tensor([2, 2], [1, 0, 0, 2]), [1.0, 1.0])
        assert alpha == [1.0, 2.0], alpha
        assert abs(st.spearman([1, 2, 3, 4], [10, 20, 20, 40]) - 0.9486832980505138) < 1e-12

        inv = st.PhonemeInventory(["k", "a", "t"])
        ids = inv.encode(["k", "a", "t", "a"])
        assert len(ids) == 50 and inv.decode(ids) == ["k", "a", "t", "a"]

        corpus = os.path.join(work, "corpus")
        summary = st.synth_corpus(corpus, utterances=12, seed=3, embedding_dim=13)
        assert summary["utterances"] == 12

        config = os.path.join(work, "run.json")
        with open(config, "w") as f:
            json.dump(
                {
                    "corpus_root": "corpus",
                    "embedding_path": "corpus/embeddings.vec",
                    "output_dir": "out",
                    "d_w": 13,
                    "mfcc": {"d_mfcc": 13},
                    "hidden": 8,
                    "d_e": 8,
                    "m": 1,
                    "train": {"epochs": 2, "batch_size": 16, "early_stop_patience": 1},
                },
                f,
            )
        assert json.loads(st.resolve_config(config))["hidden"] == 8
        run = st.train(config)
        model = st.Model.load(run["checkpoint"])
        assert model.num_parameters > 0
        assert model.parameter("proj.b").shape == [len(model.phones) + 4]
        report = st.evaluate(run["checkpoint"], split="test")
        assert 0.0 <= report["token_acc"] <= 1.0
        vectors = model.word_vectors("all")
        assert vectors and all(len(v) == 8 for v in vectors.values())

        try:
            st.Tensor([2, 2], [1.0])
        except ValueError:
            pass
        else:
            raise AssertionError("shape mismatch accepted")
        print("python smoke test passed")
    finally:
        shutil.rmtree(work, ignore_errors=True)


if __name__ == "__main__":
    main()
