import math

import numpy as np
import pytest
import torch

from digisc.data import synthetic_textures
from digisc.errors import ConfigurationError, IncompleteGridError, StageMismatchError
from digisc.evaluation import (
    ExperimentRecord,
    ResultsStore,
    batch_psnr,
    evaluate_scheme,
    multiround,
    ordering_report,
    psnr,
    transmit,
)
from digisc.checkpoint import restore
from digisc.modulators import ModulatorConfig
from digisc.seeding import derive_seed, torch_generator
from digisc.training import TrainConfig, finetune_digital, pretrain_analog

SNRS = (0.0, 9.0, 18.0)


@pytest.fixture(scope="module")
def images():
    return synthetic_textures(48, seed=5)


@pytest.fixture(scope="module")
def analog(images):
    return pretrain_analog(TrainConfig(epochs=1, batch_size=16, seed=1), images)


@pytest.fixture(scope="module")
def digital(analog, images):
    return finetune_digital(analog, TrainConfig("digital", 1, 16, 1e-4, seed=2, modulator=ModulatorConfig(order=16)), images)


# ---------------------------------------------------------------- psnr

def test_psnr_examples():
    a = np.full((4, 4, 3), 0.5)
    assert psnr(a, a) == math.inf
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)


def test_psnr_matches_independent_computation():
    rng = np.random.default_rng(0)
    a, b = rng.random((32, 32, 3)), rng.random((32, 32, 3))
    mse = ((a - b) ** 2).sum() / a.size
    assert abs(psnr(a, b) - 10 * math.log10(1 / mse)) < 1e-9
    t = batch_psnr(torch.as_tensor(a[None]), torch.as_tensor(b[None]))
    assert abs(t[0] - psnr(a, b)) < 1e-9


def test_psnr_shape_mismatch():
    with pytest.raises(ConfigurationError):
        psnr(np.zeros((2, 2)), np.zeros((2, 3)))


# ---------------------------------------------------------------- sweeps

def test_infinite_snr_analog_equals_noiseless(analog, images):
    model, _ = restore(analog)
    x = torch.as_tensor(images)
    with torch.no_grad():
        clean = model.decode(model.encode(x))
    expect = float(np.mean(batch_psnr(x, clean)))
    rec = evaluate_scheme(analog, "analog", [math.inf], images, seed=0)[0]
    assert rec.psnr_db == expect


def test_digital_at_infinite_snr_not_above_analog(analog, images):
    a = evaluate_scheme(analog, "analog", [math.inf], images, seed=0)[0]
    d = evaluate_scheme(analog, "ste-finetune", [math.inf], images, seed=0, modulator=ModulatorConfig(order=16))[0]
    assert d.psnr_db <= a.psnr_db
    assert d.ser == 0.0 and d.ber == 0.0


def test_same_seed_identical_records(digital, images):
    a = evaluate_scheme(digital, "ste-finetune", SNRS, images, seed=3)
    b = evaluate_scheme(digital, "ste-finetune", SNRS, images, seed=3)
    assert [r.psnr_db for r in a] == [r.psnr_db for r in b]
    assert [r.order for r in a] == [16] * 3 and all(0 <= r.ser <= 1 for r in a)


def test_cells_independent_of_grid_order(digital, images):
    a = evaluate_scheme(digital, "ste-finetune", SNRS, images, seed=3)
    b = evaluate_scheme(digital, "ste-finetune", SNRS[::-1], images, seed=3)
    assert [r.psnr_db for r in a] == [r.psnr_db for r in b][::-1]


def test_evaluate_stage_mismatch(analog, digital, images):
    with pytest.raises(StageMismatchError):
        evaluate_scheme(digital, "analog", SNRS, images, seed=0)
    with pytest.raises(StageMismatchError):
        evaluate_scheme(analog, "ste-finetune", SNRS, images, seed=0)
    with pytest.raises(ConfigurationError):
        evaluate_scheme(analog, "nonsense", SNRS, images, seed=0)


def test_multiround_single_hop_matches_sweep(digital, images):
    one = multiround(digital, 1, 9.0, images, seed=4, scheme="ste-finetune")
    rec = evaluate_scheme(digital, "ste-finetune", [9.0], images, seed=4)[0]
    assert one[0] == rec.psnr_db


def test_multiround_analog_accumulates(analog, images):
    vals = multiround(analog, 3, 0.0, images, seed=4)
    assert len(vals) == 3 and vals[2] < vals[0]


def test_evaluation_is_side_effect_free(digital, images):
    before = {k: v.clone() for k, v in digital.model_state.items()}
    evaluate_scheme(digital, "ste-finetune", SNRS, images, seed=0)
    assert all(torch.equal(before[k], digital.model_state[k]) for k in before)


def test_transmit_batches_consistent(digital, images):
    model, link = restore(digital)
    x = torch.as_tensor(images)
    a, _, _ = transmit(model, link, x, math.inf, torch_generator(derive_seed(0, "t")), batch_size=7)
    b, _, _ = transmit(model, link, x, math.inf, torch_generator(derive_seed(0, "t")), batch_size=48)
    assert torch.allclose(a, b, atol=1e-5)


# ---------------------------------------------------------------- ordering report

def synthetic_records(orders=(4, 16, 64), snrs=(0.0, 6.0, 12.0, 18.0), flip=None):
    base = {"analog": 4.0, "ste-irregular": 3.0, "ste-finetune": 2.0, "ste-direct": 1.0}
    recs = []
    for s, b in base.items():
        for m in (orders if s != "analog" else [None]):
            for snr in snrs:
                v = 20 + b + snr / 3 + (0 if m is None else math.log2(m) / 10)
                if flip and flip == (s, m, snr):
                    v -= 2
                recs.append(ExperimentRecord(s, m, snr, 0, 10, v))
    return recs


def test_ordering_report_passes():
    checks = ordering_report(synthetic_records())
    assert all(c.passed for c in checks) and len(checks) == 3 * 3 + 3


def test_ordering_report_allows_one_inversion():
    checks = ordering_report(synthetic_records(flip=("ste-irregular", 16, 6.0)))
    c = next(c for c in checks if c.name == "M=16: ste-irregular >= ste-finetune")
    assert c.passed and c.violations == [6.0]


def test_ordering_report_names_failing_cell():
    recs = synthetic_records(flip=("ste-finetune", 64, 12.0))
    for r in recs:
        if r.scheme == "ste-finetune" and r.order == 64:
            r.psnr_db -= 3
    checks = ordering_report(recs)
    bad = [c for c in checks if not c.passed]
    assert any(c.name == "M=64: ste-finetune >= ste-direct" and 12.0 in c.violations for c in bad)
    assert any(c.name == "ste-finetune: PSNR non-decreasing in M" for c in bad)


def test_ordering_report_incomplete():
    recs = [r for r in synthetic_records() if not (r.scheme == "ste-direct" and r.order == 4 and r.snr_db == 0.0)]
    with pytest.raises(IncompleteGridError):
        ordering_report(recs)


# ---------------------------------------------------------------- store

def test_results_store_roundtrip(tmp_path):
    store = ResultsStore(tmp_path / "res")
    recs = synthetic_records()
    recs.append(ExperimentRecord("ste-direct", 4, math.inf, 0, 3, math.inf))
    rid = store.append(recs)
    back = store.load(rid)
    assert [r.psnr_db for r in back] == [r.psnr_db for r in recs]
    store.append([ExperimentRecord("analog", None, 0.0, 0, 10, 99.0)], "second")
    latest = {(r.scheme, r.order, r.snr_db): r.psnr_db for r in store.latest()}
    assert latest[("analog", None, 0.0)] == 99.0
    header = store.summary_path.read_text().splitlines()[0]
    assert header == "scheme,order,snr_db,mean_psnr_db,std_psnr_db,ser,ber,n_images"


def test_record_validation():
    with pytest.raises(ConfigurationError):
        ExperimentRecord("analog", None, 0.0, 0, 0, 20.0)
    with pytest.raises(ConfigurationError):
        ExperimentRecord("analog", None, 0.0, 0, 5, float("nan"))
