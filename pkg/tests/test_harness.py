import json

import numpy as np
import pytest
import torch

from helpers import minimal_scene, pedestrian_scene
from socialformer.checkpoint import (
    SchemaError,
    load_checkpoint,
    parameter_store,
    read_predictions,
    save_checkpoint,
    write_predictions,
)
from socialformer.cli import main
from socialformer.config import RunConfig, parse_config
from socialformer.model import build_model
from socialformer.plotting import plot_scene
from socialformer.scene import Scene, read_scenes, write_scenes
from socialformer.synth import generate_scenes
from socialformer.training import NonFiniteLossError, dataset_loss, evaluate, predict, train

SMALL = dict(d_model=8, heads=2, k=16, K=10, d_z=4, decoder_hidden=16, batch_size=4)


@pytest.fixture(scope="module")
def scenes():
    return generate_scenes("straight", 6, seed=0, n_agents=3) + generate_scenes("intersection", 4, seed=0, n_agents=3)


def test_config_parsing():
    cfg = parse_config("# comment\nd_model = 16\nheads=2\nlearn_edge_attr = false\nlambda2 = 0.2  # trailing\n")
    assert (cfg.d_model, cfg.heads, cfg.learn_edge_attr, cfg.lambda2) == (16, 2, False, 0.2)
    assert parse_config(cfg.dumps()) == cfg
    with pytest.raises(ValueError):
        parse_config("no_such_key = 1\n")
    with pytest.raises(ValueError):
        parse_config("d_model 16\n")
    with pytest.raises(ValueError):
        RunConfig(k=4, K=10)
    with pytest.raises(ValueError):
        RunConfig(d_model=10, heads=4)
    assert RunConfig().learning_rate == 0.001


def test_lambda2_zero_leaves_graph_head_to_weight_decay(scenes):
    cfg = RunConfig(**SMALL, lambda2=0.0, epochs=1, max_steps=1)
    model = build_model(cfg)
    before = {n: p.detach().clone() for n, p in model.graph_decoder.named_parameters()}
    train(cfg, scenes[:4], model=model)
    decay = 1 - cfg.learning_rate * cfg.weight_decay
    for n, p in model.graph_decoder.named_parameters():
        assert torch.equal(p.detach(), before[n] * decay), n
    other = dict(model.decoder.named_parameters())["fc1.weight"]
    assert other.grad is not None and other.grad.abs().sum() > 0


def test_logged_total_is_weighted_sum(scenes):
    cfg = RunConfig(**SMALL, lambda1=0.7, lambda2=0.2, epochs=1)
    res = train(cfg, scenes)
    for rec in res.steps:
        assert rec["l_total"] == 0.7 * rec["l_fr"] + 0.2 * rec["l_gr"]
    assert res.epochs[0]["steps"] == 3


def test_training_is_deterministic(scenes):
    cfg = RunConfig(**SMALL, epochs=2)
    a = train(cfg, scenes, scenes[:3])
    b = train(cfg, scenes, scenes[:3])
    assert a.steps == b.steps and a.epochs == b.epochs
    assert {"ade_5", "mr_5", "fde_5", "ade_10", "mr_10", "fde_10"} <= set(a.epochs[-1])
    for (n, p), (_, q) in zip(a.model.state_dict().items(), b.model.state_dict().items()):
        assert torch.equal(p, q), n


def test_non_finite_loss_names_the_scene(scenes):
    good = minimal_scene("good")
    # finite but so far away that the displacement norm overflows
    bad = Scene("bad-scene", good.lane_graph, good.tracks, good.interaction_graphs, good.target_id,
                ((1e308, 1e308),) * 12)
    cfg = RunConfig(**dict(SMALL, batch_size=2), epochs=1)
    with pytest.raises(NonFiniteLossError) as err:
        train(cfg, [good, bad])
    assert err.value.scene_id == "bad-scene" and err.value.step == 0


def test_checkpoint_round_trip_is_bit_exact(scenes, tmp_path):
    cfg = RunConfig(**SMALL, epochs=1)
    model = train(cfg, scenes).model
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    assert loaded.config == model.config
    a, b = parameter_store(model), parameter_store(loaded)
    assert a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)
    assert evaluate(loaded, scenes) == evaluate(model, scenes)
    assert dataset_loss(loaded, scenes) == dataset_loss(model, scenes)


def test_checkpoint_schema_errors(tmp_path):
    model = build_model(RunConfig(**SMALL))
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    with np.load(path) as z:
        arrays = {k: z[k] for k in z.files}
    bad = dict(arrays, __schema__=np.frombuffer(b"sf-ckpt/0", dtype=np.uint8))
    np.savez(tmp_path / "old.npz", **bad)
    with pytest.raises(SchemaError):
        load_checkpoint(tmp_path / "old.npz")
    name = next(k for k in arrays if not k.startswith("__"))
    np.savez(tmp_path / "shape.npz", **dict(arrays, **{name: np.zeros(3)}))
    with pytest.raises(SchemaError):
        load_checkpoint(tmp_path / "shape.npz")
    np.savez(tmp_path / "missing.npz", **{k: v for k, v in arrays.items() if k != name})
    with pytest.raises(SchemaError):
        load_checkpoint(tmp_path / "missing.npz")


def test_evaluate_contracts(scenes):
    model = build_model(RunConfig(**SMALL))
    with pytest.raises(ValueError):
        evaluate(model, [])
    report = evaluate(model, scenes + [minimal_scene()])
    assert report["n_scenes"] == 11 and report["n_without_relations"] >= 1
    assert report["ade_10"] <= report["ade_5"] and report["mr_10"] <= report["mr_5"]


def test_predictions_are_batch_independent(scenes):
    model = build_model(RunConfig(**SMALL))
    whole = predict(model, scenes, batch_size=10)
    single = [predict(model, [s], batch_size=1)[0] for s in scenes]
    for a, b in zip(whole, single):
        assert np.allclose(a.modes, b.modes, atol=1e-9)


def test_prediction_file_round_trip(scenes, tmp_path):
    model = build_model(RunConfig(**SMALL))
    preds = predict(model, scenes[:3])
    path = tmp_path / "p.jsonl"
    write_predictions(path, [s.scene_id for s in scenes[:3]], preds)
    back = read_predictions(path)
    for s, p in zip(scenes, preds):
        assert np.array_equal(back[s.scene_id].modes, p.modes)
        assert np.array_equal(back[s.scene_id].scores, p.scores)
    rec = json.loads(path.read_text().splitlines()[0])
    rec["schema"] = "sf-pred/0"
    (tmp_path / "bad.jsonl").write_text(json.dumps(rec) + "\n")
    with pytest.raises(SchemaError):
        read_predictions(tmp_path / "bad.jsonl")


def test_plot_is_written_and_deterministic(tmp_path):
    scene = pedestrian_scene()
    pred = predict(build_model(RunConfig(**SMALL)), [scene])[0]
    a, b = tmp_path / "a.svg", tmp_path / "b.svg"
    plot_scene(scene, pred, a)
    plot_scene(scene, pred, b)
    assert a.stat().st_size > 0
    assert a.read_bytes() == b.read_bytes()
    with pytest.raises(OSError):
        plot_scene(scene, pred, tmp_path / "missing-dir" / "x.svg")


def test_cli_end_to_end(tmp_path, capsys):
    scenes_path = tmp_path / "scenes.jsonl"
    assert main(["synth", "--topology", "roundabout", "--count", "3", "--seed", "4", "--agents", "3",
                 "--pedestrians", "1", "--noise-std", "0.05", "--out", str(scenes_path)]) == 0
    assert json.loads(capsys.readouterr().out)["written"] == 3
    cfg = RunConfig(**SMALL, epochs=1, train_scenes=str(scenes_path), val_scenes=str(scenes_path))
    (tmp_path / "run.cfg").write_text(cfg.dumps())
    ckpt, log = tmp_path / "m.ckpt", tmp_path / "log.jsonl"
    main(["train", "--config", str(tmp_path / "run.cfg"), "--out", str(ckpt), "--log", str(log)])
    epoch = json.loads(capsys.readouterr().out.splitlines()[-1])
    assert "ade_5" in epoch and ckpt.stat().st_size > 0
    assert len(log.read_text().splitlines()) == 2

    main(["eval", "--ckpt", str(ckpt), "--scenes", str(scenes_path), "--k", "10"])
    report = json.loads(capsys.readouterr().out)
    assert report == evaluate(load_checkpoint(ckpt), read_scenes(scenes_path), 10)

    main(["predict", "--ckpt", str(ckpt), "--scenes", str(scenes_path), "--out", str(tmp_path / "p.jsonl")])
    capsys.readouterr()
    preds = read_predictions(tmp_path / "p.jsonl")
    assert len(preds) == 3

    sid = next(iter(preds))
    main(["plot", "--ckpt", str(ckpt), "--scenes", str(scenes_path), "--scene-id", sid,
          "--out", str(tmp_path / "s.svg")])
    assert (tmp_path / "s.svg").stat().st_size > 0
    with pytest.raises(SystemExit):
        main(["plot", "--ckpt", str(ckpt), "--scenes", str(scenes_path), "--scene-id", "nope",
              "--out", str(tmp_path / "t.svg")])


def test_scene_file_round_trip_through_cli_format(scenes, tmp_path):
    write_scenes(tmp_path / "s.jsonl", scenes)
    assert read_scenes(tmp_path / "s.jsonl") == scenes


def test_learning_rate_schedules(scenes):
    const = train(RunConfig(**SMALL, epochs=2), scenes)
    assert {r["lr"] for r in const.steps} == {0.001}
    cos = train(RunConfig(**SMALL, epochs=2, lr_schedule="cosine"), scenes)
    lrs = [r["lr"] for r in cos.steps]
    assert lrs[0] == 0.001 and all(a > b for a, b in zip(lrs, lrs[1:]))
    assert lrs[-1] == pytest.approx(0.001 * 0.5 * (1 + np.cos(np.pi * 5 / 6)))
    with pytest.raises(ValueError):
        RunConfig(lr_schedule="step")
