#!/usr/bin/env python3
"""Smoke test for the rcfg_py extension module.

Build the module first, then run this script from the repository root:

    cargo build --release -p rcfg-py
    python3 python/smoke_test.py
"""

import shutil
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent


def load_module():
    """Copy the compiled cdylib next to a temp dir as rcfg_py.so and import it."""
    candidates = [
        REPO / "target" / profile / name
        for profile in ("release", "debug")
        for name in ("librcfg_py.so", "librcfg_py.dylib", "rcfg_py.dll")
    ]
    built = next((p for p in candidates if p.exists()), None)
    if built is None:
        sys.exit("rcfg_py cdylib not found; run: cargo build --release -p rcfg-py")
    stage = Path(tempfile.mkdtemp(prefix="rcfg_py_"))
    shutil.copy2(built, stage / "rcfg_py.so")
    sys.path.insert(0, str(stage))
    import rcfg_py

    return rcfg_py


def main():
    rcfg = load_module()
    failures = []

    def check(name, cond, detail=""):
        status = "ok" if cond else "FAIL"
        print(f"{status:4} {name} {detail}")
        if not cond:
            failures.append(name)

    check("tokens", rcfg.TOKENS == ["A", "B", "LP", "RP", "EOS"] and rcfg.VOCAB == 5)

    corpus = rcfg.gen_corpus("uniform_valid", 5000, seed=1)
    check("gen_corpus", len(corpus) == 5000 and all(rcfg.is_valid(s) for s in corpus))
    check("gen_corpus deterministic", corpus == rcfg.gen_corpus("uniform_valid", 5000, seed=1))

    props = rcfg.properties(corpus[0])
    check("properties", set(props) == {"depth", "has_AA", "len_bin", "n_A"}, str(props))

    model = rcfg.Model.fit(corpus, seed=2)
    dist = model.next_dist("")
    check("next_dist simplex", len(dist) == 5 and abs(sum(dist) - 1.0) < 1e-12, str(dist))

    with tempfile.TemporaryDirectory() as d:
        path = str(Path(d) / "model.txt")
        model.save(path)
        first = Path(path).read_text()
        reloaded = rcfg.Model.load(path)
        path2 = str(Path(d) / "model2.txt")
        reloaded.save(path2)
        check("serialization round-trip", first == Path(path2).read_text())
        check("reloaded dist bit-equal", reloaded.next_dist("A B") == model.next_dist("A B"))

    plain = model.sample(200, seed=3)
    check("sample", len(plain) == 200 and plain == model.sample(200, seed=3))
    check("sample mostly valid", sum(rcfg.is_valid(s) for s in plain) >= 180,
          f"{sum(rcfg.is_valid(s) for s in plain)}/200 valid")

    pool = rcfg.Pool.full()
    names = rcfg.reward_names()
    check("reward_names", len(names) == 6, str(names))
    reward = rcfg.Reward.builtin("max_nA")
    check("reward metadata", reward.name == "max_nA" and reward.depends_on == ["n_A"])

    guided = model.guided_sample(reward, pool, 200, seed=4, gamma=2.0)
    check("guided_sample deterministic",
          guided == model.guided_sample(reward, pool, 200, seed=4, gamma=2.0))

    def mean_reward(seqs):
        scored = [reward.evaluate(s, pool) for s in seqs if rcfg.is_valid(s)]
        return sum(scored) / len(scored)

    base_r, guided_r = mean_reward(plain), mean_reward(guided)
    check("guidance raises reward", guided_r > base_r, f"base {base_r:.3f} guided {guided_r:.3f}")

    neutral = model.guided_sample(reward, pool, 50, seed=4, gamma=0.0)
    check("gamma=0 runs", len(neutral) == 50)

    max_resid, min_gap = model.oracle_check(reward, pool)
    check("oracle q residual", max_resid <= 1e-10, f"{max_resid:.3e}")
    check("oracle jensen gap", min_gap >= -1e-10, f"{min_gap:.3e}")

    heldout_pool = rcfg.Pool.from_sequences(corpus[:500])
    check("empirical pool", len(heldout_pool) > 0, f"{len(heldout_pool)} vectors")

    try:
        rcfg.Reward.builtin("no_such_reward")
        check("unknown reward rejected", False)
    except ValueError:
        check("unknown reward rejected", True)

    if failures:
        sys.exit(f"smoke test failed: {failures}")
    print("smoke test passed")


if __name__ == "__main__":
    main()
