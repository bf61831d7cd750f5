"""Smoke test for the uno_lab extension.

Build it first:

    cargo build --release -p uno-py --features extension-module

The script imports `uno_lab` if it is installed, and otherwise loads the
freshly built shared library from target/release.
"""

import importlib.util
import json
import math
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def load():
    try:
        import uno_lab

        return uno_lab
    except ImportError:
        pass
    for name in ("libuno_lab.so", "libuno_lab.dylib", "uno_lab.dll"):
        built = ROOT / "target" / "release" / name
        if built.exists():
            break
    else:
        sys.exit("uno_lab not built; run: cargo build --release -p uno-py --features extension-module")
    suffix = ".pyd" if built.suffix == ".dll" else ".so"
    staged = Path(tempfile.mkdtemp()) / f"uno_lab{suffix}"
    shutil.copy(built, staged)
    spec = importlib.util.spec_from_file_location("uno_lab", staged)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def main():
    ul = load()

    scene = ul.Scene.sample(7, 3)
    assert 1 <= len(scene) <= 3
    assert scene == ul.Scene.sample(7, 3)
    assert len(scene.render()) == 16 * 16 * 3
    assert len(scene.latent()) == 256
    caption = scene.caption()
    assert ul.detokenize(ul.tokenize(caption)) == caption
    print("scene:", scene, "|", caption)

    mask = ul.attention_mask([("cond_text", 3), ("gen_image", 2), ("sup_caption", 2), ("metaquery", 2)])
    assert mask == ul.attention_mask(
        [("cond_text", 3), ("gen_image", 2), ("sup_caption", 2), ("metaquery", 2)], oracle=True
    )
    assert not any(mask[5][:3]), "supervision caption must not see the prompt"
    assert all(mask[3][:3]), "generation tokens see the prompt"

    assert abs(ul.loss_language([[0.0] * 64] * 3, [1, 2, 3]) - math.log(64)) < 1e-9
    assert abs(ul.loss_vision([[1.0, 2.0]], [[-2.0, -4.0]]) - 1.0) < 1e-9

    cfg = {"d_model": 16, "n_layers": 1, "n_heads": 2, "ffn_hidden": 32, "d_und_feature": 8, "num_metaqueries": 4}
    model = ul.Model(json.dumps(cfg), seed=1)
    print("model:", model)
    assert "metaquery" in model.group_names()
    log = model.train(json.dumps({"stage": "pretrain", "steps": 3, "warmup_steps": 1, "batch_size": 2, "log_wall_time": False}))
    assert [m["step"] for m in log] == [1, 2, 3]
    assert all(math.isfinite(m["l_total"]) for m in log)

    out = model.generate("a red circle in the center", steps=2, seed=3)
    assert len(out["latent"]) == 256 and len(out["cells"]) == 9

    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "m.ckpt"
        model.save(str(path))
        again = ul.Model.load(str(path))
        assert again.config == model.config
        assert again.generate("a red circle in the center", steps=2, seed=3) == out

    report = model.eval_compositional(n=100, seed=0, steps=1)
    assert report["samples"] == 100 and 0.0 <= report["color"]["accuracy"] <= 1.0
    print("eval:", {k: report[k]["accuracy"] for k in ("color", "shape", "position", "count", "exact_match")})
    print("smoke test passed")


if __name__ == "__main__":
    main()
