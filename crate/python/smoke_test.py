"""Smoke test for the latent_grpo_py extension module.

Build and run from the repository root:

    cargo build --release -p latent-grpo-py --features extension-module
    cp target/release/liblatent_grpo_py.so python/latent_grpo_py.so
    python3 python/smoke_test.py
"""

import math
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import latent_grpo_py as lg


def check(name, cond):
    print(f"{'ok' if cond else 'FAILED'}  {name}")
    if not cond:
        sys.exit(1)


def main():
    rep = lg.verify_gradients(trials=20)
    check("gradient identities", rep["passed"] and rep["max_rel_error"] < 1e-4)
    bad = lg.verify_gradients(trials=20, missing_flip=True)
    check("missing flip detected", "one_sided_component_score" in bad["failed_identities"])

    ids, probs = lg.top_k([0.1, 0.5, 0.15, 0.25], 2)
    check("top-k", ids == [1, 3] and abs(sum(probs) - 1) < 1e-12)

    xi = lg.one_sided_transform([-5.0, 0.0, 5.0])
    check("one-sided range", all(0.01 <= x <= 4.51 for x in xi))

    w = lg.mixture_weights([math.log(0.7), math.log(0.3)], [0.2, 1.0])
    w2 = lg.mixture_weights([math.log(0.7), math.log(0.3)], [10.2, 11.0])
    check("mixture shift invariance", max(abs(a - b) for a, b in zip(w, w2)) < 1e-12)

    val, grad = lg.gumbel_log_density([0.0, -1.0], [-0.5, -1.5])
    d = 0.5
    check("gumbel score", all(abs(g - (1 - math.exp(-d))) < 1e-12 for g in grad) and math.isfinite(val))

    g = lg.sample_gumbel(200_000, 7)
    check("gumbel mean", abs(sum(g) / len(g) - 0.5772) < 0.02)
    check("pass@k", abs(lg.pass_at_k(4, 1, 2) - 0.5) < 1e-12)

    task = lg.generate_task(3, 2)
    check("task", len(task["answer_tokens"]) >= 1 and task["prompt"])

    cfg = lg.Config()
    d = cfg.as_dict()
    d_toml = cfg.to_toml().replace("d_model = 32", "d_model = 8")
    small = lg.Config.from_toml(d_toml)
    check("config round trip", small.as_dict()["model"]["d_model"] == 8 and d["model"]["d_model"] == 32)
    alg, variant = small.variant("no_one_sided")
    check("variant", alg == "latent_grpo" and variant.as_dict()["rl"]["one_sided"] == "off")

    check("policy size", lg.Policy(d_model=8).num_parameters < lg.Policy().num_parameters)
    policy = lg.Policy.from_config(small)
    trainer = lg.Trainer(small, policy)
    m = trainer.train_step()
    check("train step", trainer.step == 1 and 0.0 <= m["valid_fraction"] <= 1.0)
    print("smoke test passed")


if __name__ == "__main__":
    main()
