"""Smoke test for the clinsum_py extension.

Build and install first:
    maturin build --release -m crates/python/Cargo.toml -o target/wheels
    pip install --force-reinstall target/wheels/clinsum_py-*.whl
"""

import csv
import json
import os
import tempfile

import clinsum_py as cs


def check_metrics():
    r = cs.rouge_n("the cat sat on the mat", "the cat sat on the mat")
    assert r.f1 == 1.0, r
    r2 = cs.rouge_n("the cat sat", "the cat ran", n=2)
    assert abs(r2.f1 - 0.5) < 1e-12, r2
    assert cs.rouge_l("a b c d", "a c d").recall == 1.0
    ex = cs.extractiveness("doctor asked about the cough today", "the cough today")
    assert ex.coverage == 1.0 and ex.density == 3.0, ex
    assert cs.extractive_fragments("a b c d", "b c x") == [["b", "c"]]
    assert cs.tokenize("Doctor: Hi!") == ["doctor", "hi"]


def check_selection():
    vectors = {"x": [1.0, 0.0], "y": [0.9, 0.1], "z": [0.0, 1.0]}
    index = cs.EmbeddingIndex(vectors)
    assert len(index) == 3 and index.dimension == 2
    top = index.top_k([1.0, 0.0], 2)
    assert [i for i, _ in top] == ["x", "y"], top
    # lambda=1 is pure relevance
    assert [i for i, _ in index.mmr([1.0, 0.0], 2, lambda_=1.0)] == ["x", "y"]
    # low lambda trades the near-duplicate for the diverse vector
    assert [i for i, _ in index.mmr([1.0, 0.0], 2, lambda_=0.3)] == ["x", "z"]
    assert [i for i, _ in index.top_k([1.0, 0.0], 1, exclude=["x"])] == ["y"]
    v = cs.hash_embed("patient reports cough", 64)
    assert abs(sum(x * x for x in v) - 1.0) < 1e-9
    assert abs(cs.cosine_similarity(v, v) - 1.0) < 1e-12


def check_prompts_and_labels():
    examples = [("1", "Doctor: Allergies?\nPatient: None.", "No known allergies.", "ALLERGY")]
    text = cs.render_prompt_selection_a("Doctor: Any surgeries?", examples, "PASTSURGICAL")
    assert text.count("Dialogue:") == 2 and "No known allergies." in text
    assert "{" not in cs.render_zero_shot_b("[doctor] hi")
    assert cs.render_header_classify("Doctor: hi").strip()
    assert cs.parse_header("genhx") == "GENHX"
    assert cs.parse_llm_label("The section is ROS.") == "ROS"
    assert cs.ensemble("FAM/SOCHX", "CC") == "CC"
    assert cs.ensemble("FAM/SOCHX", "EXAM") == "FAM/SOCHX"
    assert len(cs.prompt_hash("hello")) == 64
    try:
        cs.parse_header("not a header")
    except ValueError:
        pass
    else:
        raise AssertionError("bad header accepted")


def check_pipeline():
    with tempfile.TemporaryDirectory() as tmp:
        train = os.path.join(tmp, "train.csv")
        headers = ["GENHX", "ROS", "CC", "ALLERGY", "MEDICATIONS"]
        with open(train, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["ID", "section_header", "section_text", "dialogue"])
            for i in range(20):
                w.writerow([f"a{i}", headers[i % 5], f"Summary {i} about item {i % 4}.",
                            f"Doctor: visit {i}?\nPatient: item {i % 4} hurts."])
        config = {
            "train_path": train,
            "k": 2,
            "evaluate_on": "train",
            "self_exclude": False,
            "llm": {"mock": "echo"},
            "embedding": {"provider": "hash", "dimension": 128},
            "cache_dir": os.path.join(tmp, "cache"),
            "out_dir": os.path.join(tmp, "runs"),
        }
        out = json.loads(cs.run_pipeline(json.dumps(config), write=True))
        assert out["manifest"]["completed"] == 16, out["manifest"]["completed"]
        assert out["report"]["macro_avg"]["rouge1"]["f1"] == 1.0
        assert os.path.isfile(os.path.join(out["run_dir"], "manifest.json"))


if __name__ == "__main__":
    check_metrics()
    check_selection()
    check_prompts_and_labels()
    check_pipeline()
    print("clinsum_py smoke test: ok")
