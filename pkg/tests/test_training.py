import io
import zipfile

import numpy as np
import pytest

from gradcheck import check
from protomts.dataset import Dataset
from protomts.errors import ConfigError, ContractError, ModelLoadError
from protomts.losses import RegularizerWeights
from protomts.tensor import softmax_cross_entropy
from protomts.training import (
    TrainConfig,
    composed_logits,
    cosine_lr,
    evaluate,
    fit,
    forward,
    load_model,
    model_for,
    parameters,
    predict,
    pretrain_encoders,
    train_multivariable_stage,
    train_single_variable_stage,
)
from toy import TINY, save_bytes, toy


@pytest.fixture(scope="module")
def trained():
    data = toy()
    return fit(data, TINY), data


def hashes_of(model, prefix):
    return {k: v for k, v in model.parameter_hashes().items() if k.startswith(prefix)}


# -- config --------------------------------------------------------------------
def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(lr_stage1=-1.0)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"bogus": 1})
    cfg = TrainConfig(weights=RegularizerWeights(0.1, 0.2, 0.3, 2.0))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_cosine_schedule_endpoints():
    assert cosine_lr(0.01, 0, 100) == 0.01
    assert cosine_lr(0.01, 50, 100) == pytest.approx(0.005)
    assert cosine_lr(0.01, 100, 100) == pytest.approx(0.0, abs=1e-18)


# -- stage contracts -------------------------------------------------------------
def test_stage_order_enforced():
    data = toy()
    model = model_for(data, TINY)
    with pytest.raises(ContractError):
        train_single_variable_stage(model, data)
    with pytest.raises(ContractError):
        train_multivariable_stage(model, data)
    pretrain_encoders(model, data)
    with pytest.raises(ContractError):
        pretrain_encoders(model, data)
    with pytest.raises(ContractError):
        train_multivariable_stage(model, data)


def test_stage_isolation():
    data = toy()
    model = model_for(data, TINY)
    before = model.parameter_hashes()
    pretrain_encoders(model, data)
    after1 = model.parameter_hashes()
    assert all(after1[k] != before[k] for k in before if k.startswith("encoder"))
    assert set(after1) - set(before) == {"norm/mean", "norm/std"}

    train_single_variable_stage(model, data)
    after2 = model.parameter_hashes()
    assert hashes_of(model, "encoder") == {k: v for k, v in after1.items() if k.startswith("encoder")}
    assert set(after2) - set(after1) == {f"single{k}/prototypes" for k in range(2)} | {"temp_head/W", "temp_head/b"}

    train_multivariable_stage(model, data)
    after3 = model.parameter_hashes()
    for k, v in after2.items():
        assert after3[k] == v, k
    assert set(after3) - set(after2) == {"multi/prototypes", "head/W", "head/b"}
    assert model.stages == [True, True, True]


def test_stage_one_single_class_propagates():
    data = Dataset(np.random.default_rng(0).normal(size=(6, 1, 5)), np.zeros(6, int), ["a"])
    with pytest.raises(Exception, match="two classes"):
        pretrain_encoders(model_for(data, TINY), data)


def test_data_shape_mismatch():
    data = toy()
    model = model_for(data, TINY)
    with pytest.raises(ContractError):
        pretrain_encoders(model, toy(n=9))


def test_dimension_chain(trained):
    model, _ = trained
    for enc, layer in zip(model.encoders, model.single):
        assert layer.dim == enc.hidden
    assert model.multi.dim == sum(layer.count for layer in model.single)
    assert model.head.W.shape == (model.multi.count, 3)
    assert model.temp_head.W.shape == (4, 3)


# -- gradient of the full composed model ---------------------------------------------
@pytest.mark.parametrize("trial", range(20))
def test_full_model_gradcheck(trial, trained):
    model, data = trained
    rng = np.random.default_rng(trial)
    idx = rng.choice(len(data), size=3, replace=False)
    Xn = model.prepare(data.X[idx])
    Xn = Xn + 0.1 * rng.normal(size=Xn.shape)
    y = data.y[idx]
    params = [p for p in parameters(model) if p is not model.temp_head.W and p is not model.temp_head.b]
    assert check(lambda: softmax_cross_entropy(composed_logits(model, Xn), y), params) < 1e-4
    for p in params:
        p.zero_grad()


def test_composed_matches_numpy_path(trained):
    model, data = trained
    logits = composed_logits(model, model.prepare(data.X)).data
    fw = forward(model, data.X)
    assert np.allclose(logits, model.head.logits(fw.similarities), rtol=1e-12, atol=1e-12)


# -- prediction ------------------------------------------------------------------------
def test_predict_simplex_and_determinism(trained):
    model, data = trained
    for i in range(5):
        c, p, s = predict(model, data[i])
        assert abs(p.sum() - 1.0) < 1e-9 and np.all(p >= 0)
        assert c == int(np.argmax(p))
        assert s.shape == (4,) and np.all(s > 0)
        c2, p2, s2 = predict(model, data[i])
        assert c == c2 and p.tobytes() == p2.tobytes() and s.tobytes() == s2.tobytes()


def test_predict_incomplete_model():
    data = toy()
    model = model_for(data, TINY)
    pretrain_encoders(model, data)
    with pytest.raises(ContractError):
        predict(model, data[0])


def test_evaluate_confusion_rows(trained):
    model, data = trained
    res = evaluate(model, data)
    assert np.array_equal(res["confusion"].sum(axis=1), np.bincount(data.y))
    assert res["accuracy"] == pytest.approx(np.trace(res["confusion"]) / len(data))


# -- determinism and persistence -----------------------------------------------------------
def test_full_run_deterministic(trained):
    model, data = trained
    assert save_bytes(fit(data, TINY)) == save_bytes(model)


def test_round_trip_bitwise(trained):
    model, data = trained
    raw = save_bytes(model)
    back = load_model(io.BytesIO(raw))
    assert save_bytes(back) == raw
    assert back.parameter_hashes() == model.parameter_hashes()
    assert back.config == model.config and back.stages == model.stages
    for i in range(len(data)):
        a, b = predict(model, data[i]), predict(back, data[i])
        assert a[0] == b[0] and a[1].tobytes() == b[1].tobytes() and a[2].tobytes() == b[2].tobytes()


def test_partial_model_round_trip():
    data = toy()
    model = model_for(data, TINY)
    pretrain_encoders(model, data)
    back = load_model(io.BytesIO(save_bytes(model)))
    assert back.stages == [True, False, False]
    assert back.parameter_hashes() == model.parameter_hashes()


def test_truncated_file(trained):
    raw = save_bytes(trained[0])
    for cut in (10, len(raw) // 2, len(raw) - 5):
        with pytest.raises(ModelLoadError):
            load_model(io.BytesIO(raw[:cut]))


def rewrite(raw: bytes, edit) -> bytes:
    src = zipfile.ZipFile(io.BytesIO(raw))
    out = io.BytesIO()
    with zipfile.ZipFile(out, "w") as dst:
        for info in src.infolist():
            dst.writestr(info, edit(info.filename, src.read(info.filename)))
    return out.getvalue()


def test_version_mismatch(trained):
    raw = rewrite(save_bytes(trained[0]), lambda n, b: b.replace(b'"version": 1', b'"version": 99') if n == "manifest.json" else b)
    with pytest.raises(ModelLoadError) as err:
        load_model(io.BytesIO(raw))
    assert err.value.field == "version"


def test_shape_inconsistency_names_field(trained):
    def edit(name, payload):
        if name == "arrays/head/W.npy":
            buf = io.BytesIO()
            np.save(buf, np.zeros((3, 3)))
            return buf.getvalue()
        return payload

    with pytest.raises(ModelLoadError) as err:
        load_model(io.BytesIO(rewrite(save_bytes(trained[0]), edit)))
    assert err.value.field == "head/W"


def test_resume_skips_completed_stages(trained):
    _, data = trained
    model = model_for(data, TINY)
    pretrain_encoders(model, data)
    train_single_variable_stage(model, data)
    checkpoint = load_model(io.BytesIO(save_bytes(model)))
    log = []
    resumed = fit(data, TINY, model=checkpoint, log=log)
    assert {rec["stage"] for rec in log} == {3}
    assert hashes_of(resumed, "encoder") == hashes_of(model, "encoder")
    assert hashes_of(resumed, "single") == hashes_of(model, "single")
    assert save_bytes(resumed) == save_bytes(trained[0])


def test_resume_rejects_different_config(trained):
    _, data = trained
    model = model_for(data, TINY)
    pretrain_encoders(model, data)
    with pytest.raises(ContractError):
        fit(data, TrainConfig(**{**TINY.__dict__, "seed": 4}), model=model)
