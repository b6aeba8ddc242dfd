import csv
import io
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from piip.config import PRESETS, VIT_B, VIT_S, VIT_T, preset
from piip.cost import (
    analyze,
    count_macs,
    count_params,
    instrumented_macs,
    sweep,
    sweep_columns,
    sweep_csv,
    vit_layer_macs,
)
from piip.model import PiipModel, build_model, param_row
from piip.nn import ShapeInit


def enumerated_params(cfg):
    model = PiipModel(cfg, ShapeInit())
    rows = Counter()
    for name, p in model.named_parameters():
        rows[param_row(name)] += p.size
    return rows


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_count_params_equals_enumeration_row_for_row(name):
    cfg = preset(name)
    rows = enumerated_params(cfg)
    rep = count_params(cfg)
    assert {r.name: r.params for r in rep.rows if r.params} == dict(rows)
    assert rep.params_total == sum(rows.values())


def test_vit_layer_macs_hand_count():
    # ViT-B layer at 197 tokens: qkv+proj 4nD^2, MLP 2nD*4D, attention 2n^2D
    n, d = 197, 768
    assert vit_layer_macs(n, d, 4 * d) == 4 * n * d * d + 8 * n * d * d + 2 * n * n * d


def test_vit_b_closed_form():
    rep = analyze(preset("vit-b"))
    assert rep.macs_total == 12 * vit_layer_macs(197, 768, 3072) + 196 * 768 * 768 + 768 * 1000
    assert rep.params_total == 86_567_656


@pytest.mark.parametrize("kind", ["deformable", "regular"])
def test_instrumented_equals_closed_form_on_micro(kind):
    import dataclasses

    cfg = preset("piip-micro")
    cfg = cfg.replace(interactions=dataclasses.replace(cfg.interactions, attention=kind))
    model = build_model(cfg)
    x = np.zeros((1, 3, 64, 64), np.float32)
    ours = {r.name: r.macs for r in instrumented_macs(model, x).rows if r.macs}
    want = {r.name: r.macs for r in count_macs(cfg).rows if r.macs}
    assert ours == want


def test_totals_equal_row_sums():
    for name in PRESETS:
        rep = analyze(preset(name))
        assert rep.macs_total == sum(r.macs for r in rep.rows)
        assert rep.params_total == sum(r.params for r in rep.rows)


@settings(max_examples=20, deadline=None)
@given(j=st.integers(0, 2), step=st.sampled_from([16, 32, 64]))
def test_raising_a_resolution_raises_its_rows(j, step):
    cfg = preset("piip-b")
    res = [b.resolution for b in cfg.branches]
    bigger = list(res)
    bigger[j] += step
    a, b = analyze(cfg), analyze(cfg.with_resolutions(bigger))
    assert b.row(f"branch_{j + 1}").macs > a.row(f"branch_{j + 1}").macs
    for name in a.names:
        if name.startswith("interaction_") and str(j + 1) in name.split("_")[1:]:
            assert b.row(name).macs > a.row(name).macs
    for k in range(3):
        assert b.row(f"branch_{k + 1}").params == a.row(f"branch_{k + 1}").params


def test_sweep_empty_when_budget_too_small():
    assert sweep(1, [VIT_B, VIT_S, VIT_T], [128, 192, 368]) == []


def test_sweep_monotone_and_ranked():
    menu = [VIT_B, VIT_S, VIT_T]
    res = sweep(20e9, menu, list(range(96, 449, 16)))
    assert res
    for cfg, rep in res:
        r = [b.resolution for b in cfg.branches]
        assert r == sorted(r) and len(set(r)) == 3
        assert rep.macs_total <= 20e9
    keys = [(-c.branches[-1].resolution, rep.macs_total) for c, rep in res]
    assert keys == sorted(keys)


def test_sweep_deterministic_across_thread_counts():
    menu = [VIT_B, VIT_S, VIT_T]
    grid = list(range(96, 385, 32))
    one = sweep(20e9, menu, grid, threads=1)
    four = sweep(20e9, menu, grid, threads=4)
    assert sweep_csv(one, 3) == sweep_csv(four, 3)


def test_sweep_csv_parses_back_with_schema():
    res = sweep(20e9, [VIT_B, VIT_S, VIT_T], [128, 192, 368, 384])
    rows = list(csv.DictReader(io.StringIO(sweep_csv(res, 3))))
    assert list(rows[0].keys()) == sweep_columns(3)
    for row, (cfg, rep) in zip(rows, res):
        assert int(row["macs_total"]) == rep.macs_total
        parts = sum(int(row[c]) for c in sweep_columns(3)[5:])
        assert parts == rep.macs_total


def test_cost_report_csv_round_trip():
    rep = analyze(preset("piip-b"))
    rows = list(csv.DictReader(io.StringIO(rep.to_csv())))
    assert [r["name"] for r in rows][-1] == "total"
    assert int(rows[-1]["macs"]) == rep.macs_total
    assert sum(int(r["params"]) for r in rows[:-1]) == rep.params_total
