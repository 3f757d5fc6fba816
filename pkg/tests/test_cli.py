import json

import numpy as np
import pytest

from cyctr import numtensor as nt
from cyctr.ablation import format_table, paired_wins, run_ablation
from cyctr.cli import main
from cyctr.config import ConfigError, apply_overrides, from_dict, load_config
from cyctr.gradchecks import check_model, gradcheck_episode, parameter_group
from cyctr.model import CyCTRModel, VARIANTS
from cyctr.numtensor import functional as F
from cyctr.train import (
    TrainingDiverged,
    build,
    derived_seed,
    evaluate,
    evaluate_model,
    evaluation_episode,
    train,
    train_episode,
)

TINY = {
    "model": {"L": 1, "d": 8, "N_s": 8, "P": 3, "mlp_ratio": 2, "head_channels": 4, "backbone_widths": [4, 6]},
    "data": {"image_size": 16, "train_episodes": 6, "test_episodes": 5},
    "optim": {"steps": 4, "log_every": 2},
}
TINY_ARGS = [
    "--set", "model.L=1", "--set", "model.d=8", "--set", "model.N_s=8", "--set", "model.P=3",
    "--set", "model.mlp_ratio=2", "--set", "model.head_channels=4", "--set", "model.backbone_widths=[4,6]",
    "--set", "data.image_size=16", "--set", "data.train_episodes=6", "--set", "data.test_episodes=5",
    "--set", "optim.steps=4", "--set", "optim.log_every=2",
]


def tiny(**extra):
    raw = json.loads(json.dumps(TINY))
    for key, value in extra.items():
        node = raw
        parts = key.split("__")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return from_dict(raw)


def run_cli(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr().out
    return code, (json.loads(out) if out.strip() else None)


# config

def test_defaults_are_the_desk_config():
    cfg = from_dict({})
    assert (cfg.model.L, cfg.model.d, cfg.variant) == (2, 32, "cyctr")
    assert (cfg.data.n_classes, cfg.data.split, cfg.data.K) == (12, 0, 1)
    assert (cfg.data.train_episodes, cfg.data.test_episodes) == (2000, 200)


@pytest.mark.parametrize("raw", [{"nope": 1}, {"model": {"depth": 2}}, {"optim": {"lrr": 0.1}}, {"data": 3}])
def test_unknown_or_malformed_keys_are_errors(raw):
    with pytest.raises(ConfigError):
        from_dict(raw)


def test_invalid_values_are_config_errors():
    with pytest.raises(ConfigError):
        from_dict({"variant": "cyctr_plus"})
    with pytest.raises(ConfigError):
        from_dict({"model": {"d": 30}})
    with pytest.raises(ConfigError):
        from_dict({"data": {"image_size": 30}})


def test_overrides_parse_json_literals():
    raw = apply_overrides({"model": {"L": 2}}, ["model.L=3", "optim.clip_norm=null", "variant=baseline", "out=x/y"])
    assert raw == {"model": {"L": 3}, "optim": {"clip_norm": None}, "variant": "baseline", "out": "x/y"}
    with pytest.raises(ConfigError):
        apply_overrides({}, ["missing_equals"])


def test_config_file_and_overrides_round_trip(tmp_path):
    cfg = tiny(seed=3)
    path = tmp_path / "c.json"
    path.write_text(cfg.to_json())
    back = load_config(path, ["optim.lr=0.5"])
    assert back.seed == 3 and back.optim.lr == 0.5 and back.model.backbone_widths == (4, 6)
    assert load_config(path).to_json() == cfg.to_json()


def test_variant_enumeration_covers_the_ablation_rows():
    assert VARIANTS == ("baseline", "self_only", "vanilla_cross", "cyctr_pred_cross", "cyctr_fg_only", "cyctr")


# episode streams

def test_derived_seeds_are_distinct_and_stable():
    seeds = {derived_seed(0, s, i) for s in range(4) for i in range(100)}
    assert len(seeds) == 400
    assert derived_seed(5, 1, 2) == derived_seed(5, 1, 2)


def test_test_episodes_do_not_depend_on_run_seed():
    a, b = tiny(seed=0), tiny(seed=9)
    assert evaluation_episode(a, 3).query_image.tobytes() == evaluation_episode(b, 3).query_image.tobytes()
    assert train_episode(a, 3).query_image.tobytes() != train_episode(b, 3).query_image.tobytes()


def test_training_cycles_through_the_episode_pool():
    cfg = tiny()
    assert train_episode(cfg, 1).query_image.tobytes() == train_episode(cfg, 7).query_image.tobytes()


def test_overfit_mode_repeats_one_episode():
    cfg = tiny(data__overfit_episode=4)
    assert train_episode(cfg, 0).query_image.tobytes() == train_episode(cfg, 5).query_image.tobytes()


# training

def test_zero_steps_checkpoint_equals_initialisation(tmp_path):
    cfg = tiny(optim__steps=0)
    train(cfg, tmp_path)
    init = build(cfg).parameters()
    saved = nt.checkpoint.load_arrays(tmp_path / "checkpoint")
    assert set(saved) == set(init)
    for name, p in init.items():
        assert saved[name].tobytes() == p.data.tobytes()


def test_training_moves_parameters_and_logs_json_lines(tmp_path):
    cfg = tiny()
    result = train(cfg, tmp_path)
    lines = [json.loads(l) for l in (tmp_path / "train_log.jsonl").read_text().splitlines()]
    assert [l["step"] for l in lines] == [2, 4]
    assert lines == result.history
    assert json.loads((tmp_path / "config.json").read_text()) == cfg.to_dict()
    init = build(cfg).parameters()
    moved = [n for n, p in result.model.parameters().items() if not np.array_equal(p.data, init[n].data)]
    assert moved


def test_same_seed_gives_byte_identical_outputs(tmp_path):
    cfg = tiny()
    for run in ("a", "b"):
        result = train(cfg, tmp_path / run)
        (tmp_path / run / "metrics.json").write_text(json.dumps(evaluate_model(result.model, cfg), sort_keys=True))
    for name in ("checkpoint.bin", "checkpoint.json", "train_log.jsonl", "metrics.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_different_seeds_differ(tmp_path):
    a = train(tiny(seed=0)).model.parameters()
    b = train(tiny(seed=1)).model.parameters()
    assert any(not np.array_equal(a[n].data, b[n].data) for n in a)


def test_nan_loss_aborts_with_a_dump(tmp_path, monkeypatch):
    import cyctr.train as T

    real = T.dice_loss
    monkeypatch.setattr(T, "dice_loss", lambda *a, **k: real(*a, **k) * float("nan"))
    with pytest.raises(TrainingDiverged) as info:
        train(tiny(), tmp_path)
    assert info.value.dump["step"] == 0 and info.value.dump["nonfinite"] == "loss"
    assert json.loads((tmp_path / "nan_dump.json").read_text())["step"] == 0


def test_nonfinite_gradient_names_the_layer(tmp_path):
    cfg = tiny()
    model = build(cfg)
    model.head.cls.bias.data[:] = np.inf
    from cyctr.train import _nonfinite_dump

    dump = _nonfinite_dump(model, 3, float("nan"))
    assert dump["layer"] == "head.cls.bias" and dump["step"] == 3


def test_poly_learning_rate():
    from cyctr.train import learning_rate

    cfg = tiny(optim__poly_power=0.9, optim__steps=10)
    assert learning_rate(cfg, 0) == cfg.optim.lr
    assert learning_rate(cfg, 5) == pytest.approx(cfg.optim.lr * 0.5 ** 0.9)
    assert learning_rate(tiny(), 3) == tiny().optim.lr


# evaluation

def test_query_mask_is_hidden_from_the_predictor():
    cfg = tiny()
    seen = []

    def spy(ep, i):
        seen.append(ep.query_mask)
        return np.zeros(ep.query_image.shape[:2], dtype=np.uint8)

    evaluate(cfg, spy)
    assert seen and all(m is None for m in seen)


def test_oracle_and_background_stubs():
    cfg = tiny()

    def oracle(ep, i):
        return evaluation_episode(cfg, i).query_mask

    def background(ep, i):
        return np.zeros(ep.query_image.shape[:2], dtype=np.uint8)

    assert evaluate(cfg, oracle)["miou"] == 1.0
    assert evaluate(cfg, oracle)["fb_iou"] == 1.0
    assert evaluate(cfg, background)["miou"] == 0.0


def test_eval_twice_same_json():
    cfg = tiny()
    model = build(cfg)
    a = json.dumps(evaluate_model(model, cfg), sort_keys=True)
    b = json.dumps(evaluate_model(build(cfg), cfg), sort_keys=True)
    assert a == b


# gradcheck

def test_parameter_groups():
    names = CyCTRModel(tiny().model, "cyctr").parameters()
    groups = {parameter_group(n) for n in names}
    assert groups == {"extractor", "fusion", "layers.0.self", "layers.0.cross", "head"}


def test_gradcheck_report_lists_every_group_and_submodule():
    cfg = tiny()
    model = CyCTRModel(cfg.model, "cyctr", 0)
    report = check_model(model, gradcheck_episode(image_size=16), probes=12)
    assert report["passed"], report["max_rel_error"]
    assert set(report["full_model"]["groups"]) == {"extractor", "fusion", "layers.0.self", "layers.0.cross", "head"}
    assert set(report["submodules"]) == {"extractor", "fusion", "layers.0", "head"}
    assert all(v <= 1e-4 for v in report["full_model"]["groups"].values())


def test_gradcheck_catches_a_sign_flip_in_softmax_backward(monkeypatch):
    cfg = tiny()
    model = CyCTRModel(cfg.model, "cyctr", 0)
    real = F._softmax_backward
    monkeypatch.setattr(F, "_softmax_backward", lambda s, g: -real(s, g))
    report = check_model(model, gradcheck_episode(image_size=16), probes=12, submodules=False)
    assert not report["passed"]
    assert report["full_model"]["max_rel_error"] > 1.0


def test_baseline_gradcheck_includes_the_residual_encoder():
    cfg = tiny()
    report = check_model(CyCTRModel(cfg.model, "baseline", 0), gradcheck_episode(image_size=16), probes=8)
    assert "baseline" in report["submodules"] and report["passed"]


# ablation

def test_single_cell_table():
    table = run_ablation(tiny(optim__steps=2), ["cyctr"], 1)
    assert [r["variant"] for r in table["rows"]] == ["cyctr"]
    assert table["rows"][0]["std"] == 0.0 and table["comparisons"] == []
    assert json.loads(json.dumps(table)) == table
    assert "cyctr" in format_table(table)


def test_rows_follow_canonical_order_and_sweeps():
    table = run_ablation(tiny(optim__steps=1, data__test_episodes=2), ["cyctr", "baseline"], 2, L_sweep=[1, 2])
    assert [r["variant"] for r in table["rows"]] == ["baseline", "cyctr"]
    assert [r["L"] for r in table["sweeps"]["L"]["rows"]] == [1, 2]
    assert table["rows"][1]["seeds"] == [0, 1]
    text = format_table(table)
    assert "sweep over L" in text


def test_paired_wins():
    cells = [
        {"variant": "cyctr", "seed": 0, "miou": 0.5},
        {"variant": "cyctr", "seed": 1, "miou": 0.2},
        {"variant": "vanilla_cross", "seed": 0, "miou": 0.5},
        {"variant": "vanilla_cross", "seed": 1, "miou": 0.3},
    ]
    out = paired_wins(cells, "cyctr", "vanilla_cross")
    assert out["wins"] == 1 and out["seeds"] == [0, 1]


def test_unknown_variant_rejected():
    with pytest.raises(ValueError):
        run_ablation(tiny(), ["cyctr_v2"], 1)


# command line

def test_cli_train_eval_round_trip(tmp_path, capsys):
    code, out = run_cli(capsys, "train", *TINY_ARGS, "--out", str(tmp_path / "r"))
    assert code == 0 and out["status"] == "ok"
    code, first = run_cli(capsys, "eval", *TINY_ARGS, "--out", str(tmp_path / "r"))
    assert code == 0 and 0.0 <= first["miou"] <= 1.0
    assert json.loads((tmp_path / "r" / "metrics.json").read_text()) == first
    _, second = run_cli(capsys, "eval", *TINY_ARGS, "--out", str(tmp_path / "r"))
    assert first == second


def test_cli_eval_rejects_incompatible_checkpoint(tmp_path, capsys):
    run_cli(capsys, "train", *TINY_ARGS, "--out", str(tmp_path / "r"))
    code, out = run_cli(capsys, "eval", *TINY_ARGS, "--set", "model.d=12", "--out", str(tmp_path / "r"))
    assert code == 2 and out is None


def test_cli_unknown_key_exit_status(capsys):
    code, _ = run_cli(capsys, "train", "--set", "optim.lrr=1")
    assert code == 2


def test_cli_oracle(capsys):
    code, out = run_cli(capsys, "oracle", "--trials", "40", "--seed", "3")
    assert code == 0 and out["exact_matches"] == 40


def test_cli_gen_data(tmp_path, capsys):
    from cyctr.episodes import read_episode

    code, out = run_cli(capsys, "gen-data", *TINY_ARGS, "--episodes", "3", "--out", str(tmp_path))
    assert code == 0 and len(out["files"]) == 3
    ep = read_episode(out["files"][1])
    assert ep.query_image.tobytes() == evaluation_episode(tiny(), 1).query_image.tobytes()


def test_cli_gradcheck_exit_status(capsys, monkeypatch):
    args = ["gradcheck", *TINY_ARGS, "--probes", "6", "--image-size", "16"]
    code, out = run_cli(capsys, *args)
    assert code == 0 and out["passed"]
    real = F._softmax_backward
    monkeypatch.setattr(F, "_softmax_backward", lambda s, g: -real(s, g))
    code, out = run_cli(capsys, *args)
    assert code == 1 and not out["passed"]


def test_cli_ablate_writes_table(tmp_path, capsys):
    code, out = run_cli(
        capsys, "ablate", *TINY_ARGS, "--set", "optim.steps=1", "--variants", "cyctr,vanilla_cross",
        "--seeds", "1", "--sweep-L", "", "--sweep-d", "", "--out", str(tmp_path),
    )
    assert code == 0 and [r["variant"] for r in out["rows"]] == ["vanilla_cross", "cyctr"]
    assert json.loads((tmp_path / "ablation.json").read_text()) == out
    assert (tmp_path / "ablation.txt").read_text().startswith("variants")
