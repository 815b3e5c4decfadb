import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from psfl.autodiff import add, cross_entropy, gradients, mse, one_hot
from psfl.channel import ChannelRealization, SNRSchedule, sample_schedule
from psfl.data import synth_dataset
from psfl.energy import LinkBudget, model_payload_bits, upload
from psfl.errors import ContractError, ProtocolError, RoundAbort
from psfl.federation import (
    ZETA_CAP, ClientState, FLSettings, adjust_mask, broadcast_update, compute_prune_ratio,
    fedavg_aggregate, magnitude_prune, run_psfl, target_pruned,
)
from psfl.models import build_model, desk_profile
from psfl.oracles import grow_prune_oracle, scalar_weighted_mean, sort_prune_oracle
from psfl.params import ParameterSet


def _flat(weights):
    return ParameterSet({"w": np.asarray(weights, dtype=float)})


def _pruned(ps):
    return sorted(np.flatnonzero(~ps.flat_mask()).tolist())


# ---------------------------------------------------------------------------
# aggregation


def test_fedavg_table(oracle_rows):
    for row in oracle_rows("fedavg"):
        i = row["inputs"]
        out = fedavg_aggregate([_flat(v) for v in i["values"]], i["counts"])
        np.testing.assert_allclose(out["w"].data, row["expected"], rtol=1e-12, atol=1e-15, err_msg=row["case"])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 6), st.integers(1, 20))
def test_fedavg_matches_scalar_oracle(seed, k, n):
    rng = np.random.default_rng(seed)
    vals = rng.standard_normal((k, n))
    counts = rng.integers(1, 100, size=k)
    out = fedavg_aggregate([_flat(v) for v in vals], counts)["w"].data
    ref = scalar_weighted_mean(vals.tolist(), counts.tolist())
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("c", [-1.0, 0.5, 2.0])
def test_fedavg_is_linear(c):
    rng = np.random.default_rng(1)
    vals, counts = rng.standard_normal((4, 9)), [3, 1, 7, 2]
    a = fedavg_aggregate([_flat(c * v) for v in vals], counts)["w"].data
    b = c * fedavg_aggregate([_flat(v) for v in vals], counts)["w"].data
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)


def test_fedavg_idempotent_on_identical_clients():
    model = build_model(desk_profile("CSC"), seed=3)
    out = fedavg_aggregate([model.params.copy() for _ in range(4)], [5, 1, 9, 2])
    for n, t in model.params.items():
        np.testing.assert_allclose(out[n].data, t.data, rtol=1e-15, atol=0)
    assert out.prunable == model.params.prunable


def test_fedavg_errors():
    with pytest.raises(ProtocolError):
        fedavg_aggregate([], [])
    with pytest.raises(ProtocolError):
        fedavg_aggregate([_flat([1.0])], [0])
    with pytest.raises(ProtocolError):
        fedavg_aggregate([_flat([1.0]), _flat([1.0, 2.0])], [1, 1])
    with pytest.raises(ProtocolError):
        fedavg_aggregate([_flat([1.0])], [1, 2])


# ---------------------------------------------------------------------------
# prune ratio


def test_prune_ratio_table(oracle_rows):
    for row in oracle_rows("prune_ratio"):
        i = row["inputs"]
        assert compute_prune_ratio(i["snr_db"], i["psi_max"], i["psi_min"]) == row["expected"], row["case"]


def test_prune_ratio_clamps_out_of_range(caplog):
    assert compute_prune_ratio([-5.0, 30.0]) == 0.5
    assert "clamped" in caplog.text


def test_prune_ratio_errors():
    with pytest.raises(ContractError):
        compute_prune_ratio([10.0], psi_max=5, psi_min=5)
    with pytest.raises(ContractError):
        compute_prune_ratio([])
    with pytest.raises(ContractError):
        compute_prune_ratio([10.0], units="neper")


def test_linear_units_variant():
    # 10 dB between 0 and 20 dB: linear 10 within [1, 100]
    assert compute_prune_ratio([10.0], 20.0, 0.0, units="linear") == pytest.approx(90 / 99)


snr_list = st.lists(st.floats(0, 25), min_size=1, max_size=9)


@given(snr_list, snr_list)
def test_higher_mean_snr_means_lower_ratio(a, b):
    za, zb = compute_prune_ratio(a), compute_prune_ratio(b)
    assert 0.0 <= za <= 1.0
    if np.mean(a) > np.mean(b) + 1e-9:
        assert za < zb


# ---------------------------------------------------------------------------
# pruning


def test_magnitude_prune_table(oracle_rows):
    for row in oracle_rows("magnitude_prune"):
        i = row["inputs"]
        assert _pruned(magnitude_prune(_flat(i["weights"]), i["zeta"])) == row["expected"], row["case"]


def test_adjust_mask_table(oracle_rows):
    for row in oracle_rows("adjust_mask"):
        i = row["inputs"]
        base = _flat(i["weights"])
        mask = np.ones(len(i["weights"]), dtype=bool)
        mask[i["pruned"]] = False
        base.masks["w"] = mask
        out = adjust_mask(base, i["zeta_prev"], i["zeta_new"], np.random.default_rng(0))
        assert _pruned(out) == row["expected"], row["case"]


def test_prune_zero_ratio_is_identity():
    p = _flat([0.5, -0.1, 0.2])
    out = magnitude_prune(p, 0.0)
    assert out.equals(p)


def test_prune_rejects_ratio_above_cap():
    with pytest.raises(ContractError):
        magnitude_prune(_flat([1.0, 2.0]), 0.99)
    with pytest.raises(ContractError):
        adjust_mask(_flat([1.0, 2.0]), 0.0, -0.1, np.random.default_rng(0))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10**6), st.integers(4, 300), st.sampled_from([0.0, 0.25, 0.5, 0.75, ZETA_CAP]))
def test_magnitude_prune_separates_and_audits(seed, n, zeta):
    w = np.random.default_rng(seed).standard_normal(n)
    out = magnitude_prune(_flat(w), zeta)
    mask = out.flat_mask()
    k = target_pruned(zeta, n)
    assert (~mask).sum() == k
    assert np.all(out.flat()[~mask] == 0.0)
    if 0 < k < n:
        assert np.abs(w[mask]).min() >= np.abs(w[~mask]).max()
    assert _pruned(out) == sort_prune_oracle(w.tolist(), zeta)


def test_prune_at_cap_keeps_ceiling_active():
    w = np.random.default_rng(0).standard_normal(1000)
    out = magnitude_prune(_flat(w), ZETA_CAP)
    assert out.flat_mask().sum() == 50  # ceil(0.05 * 1000)


def test_adjust_same_ratio_is_identity():
    p = magnitude_prune(_flat(np.arange(1.0, 9.0)), 0.5)
    assert adjust_mask(p, 0.5, 0.5, np.random.default_rng(0)).equals(p)


def test_adjust_up_prunes_smallest_survivors():
    w = np.array([0.8, -0.1, 0.5, 0.3, -0.9, 0.2, 0.7, -0.4])
    p = magnitude_prune(_flat(w), 0.5)
    out = adjust_mask(p, 0.5, 0.75, np.random.default_rng(0))
    new = set(_pruned(out)) - set(_pruned(p))
    assert len(new) == 2
    survivors = np.abs(w[out.flat_mask()])
    assert all(abs(w[i]) < survivors.min() for i in new)


def test_adjust_down_restores_masked_positions_at_zero():
    w = np.array([0.8, -0.1, 0.5, 0.3, -0.9, 0.2, 0.7, -0.4])
    p = magnitude_prune(_flat(w), 0.5)
    out = adjust_mask(p, 0.5, 0.25, np.random.default_rng(3))
    restored = set(_pruned(p)) - set(_pruned(out))
    assert len(restored) == 2 and set(_pruned(out)) < set(_pruned(p))
    assert all(out.flat()[i] == 0.0 for i in restored)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6), st.integers(4, 200),
       st.sampled_from([0.0, 0.25, 0.5, 0.75, ZETA_CAP]), st.sampled_from([0.0, 0.25, 0.5, 0.75, ZETA_CAP]))
def test_adjust_mask_audit(seed, n, z0, z1):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(n)
    p = magnitude_prune(_flat(w), z0)
    out = adjust_mask(p, z0, z1, rng)
    mask = out.flat_mask()
    assert (~mask).sum() == target_pruned(z1, n)
    assert np.all(out.flat()[~mask] == 0.0)
    before = set(_pruned(p))
    after = set(_pruned(out))
    if z1 > z0:
        assert before <= after
        assert sorted(after) == grow_prune_oracle(p.flat().tolist(), sorted(before), z1)
    elif z1 < z0:
        assert after <= before


def test_pruning_spans_tensors_and_skips_protected():
    p = ParameterSet({"a": [0.1, 5.0], "ln": [0.0, 0.0], "b": [[0.2, 3.0]]}, prunable=["a", "b"])
    out = magnitude_prune(p, 0.5)
    assert not out.masks["a"][0] and not out.masks["b"][0, 0]
    assert out.masks["ln"].all()


def test_energy_strictly_decreases_with_ratio():
    model = build_model(desk_profile("CSC"))
    budget = LinkBudget(1e6, 0.1, 12.0)
    energies = [upload(model_payload_bits(magnitude_prune(model.params, z)), budget).energy_j
                for z in (0.0, 0.25, 0.5, 0.75, ZETA_CAP)]
    assert all(a > b for a, b in zip(energies, energies[1:]))


# ---------------------------------------------------------------------------
# broadcast


def _clients(k=3, n=12, use_mentor=True, seed=0):
    data = synth_dataset(k * n, noise=0.1, seed=seed)
    out = []
    for i in range(k):
        shard = data.subset(np.arange(i * n, (i + 1) * n))
        student = build_model(desk_profile("CSC"), seed=seed)
        mentor = build_model(desk_profile("GSC-M"), seed=seed * 1009 + i + 1) if use_mentor else None
        out.append(ClientState(i, shard, student, mentor))
    return out


def test_broadcast_sets_students_and_leaves_mentors():
    clients = _clients()
    mentors = [c.mentor.params.copy() for c in clients]
    g = magnitude_prune(build_model(desk_profile("CSC"), seed=9).params, 0.5)
    broadcast_update(g, clients)
    for c, m in zip(clients, mentors):
        assert c.student.params.equals(g)
        assert c.mentor.params.equals(m)
        assert np.all(c.student.params.flat()[~c.student.params.flat_mask()] == 0.0)
    # clients own copies, not views of the global model
    clients[0].student.params["classifier.b"].data[0] += 1
    assert not clients[1].student.params.equals(clients[0].student.params)


def test_broadcast_shape_mismatch():
    clients = _clients(1)
    with pytest.raises(ProtocolError):
        broadcast_update(build_model(desk_profile("GSC-M")).params, clients)


# ---------------------------------------------------------------------------
# round loop


def _schedule(draws):
    return SNRSchedule(np.asarray(draws, dtype=float), 0, 0.0, 25.0)


def test_round_loop_without_agp_keeps_full_payload():
    clients = _clients(2, use_mentor=False)
    s = FLSettings(rounds=3, epochs=1, use_pld=False, use_agp=False)
    recs = run_psfl(s, clients, sample_schedule(3, 2, 0, 25, seed=1))
    assert [r.zeta for r in recs] == [0.0, 0.0, 0.0]
    full = clients[0].student.params.size() * 32
    assert all(c.payload_bits == full for r in recs for c in r.clients)


def test_fixed_training_snr_leaves_schedule_in_charge(monkeypatch):
    import psfl.federation as fed
    seen = []
    real = fed.pld_local_train

    def spy(mentor, student, shard, epochs, lr, snr, *a, **kw):
        seen.append(snr)
        return real(mentor, student, shard, epochs, lr, snr, *a, **kw)

    monkeypatch.setattr(fed, "pld_local_train", spy)
    draws = [[5.0, 20.0]]
    recs = run_psfl(FLSettings(rounds=1, epochs=1, train_snr_db=12.0), _clients(2), _schedule(draws))
    assert seen == [12.0, 12.0]
    assert [c.snr_db for c in recs[0].clients] == [5.0, 20.0]
    assert recs[0].zeta == pytest.approx(0.5)
    seen.clear()
    run_psfl(FLSettings(rounds=1, epochs=1), _clients(2), _schedule(draws))
    assert seen == [5.0, 20.0]


def test_round_loop_ledger_and_masks():
    clients = _clients(3)
    draws = [[5.0, 5.0, 5.0], [20.0, 20.0, 20.0], [0.0, 0.0, 0.0]]
    masks = []
    s = FLSettings(rounds=3, epochs=1, batch_size=6)
    recs = run_psfl(s, clients, _schedule(draws),
                    on_round=lambda r, g, cs: masks.append((g.prune_fraction(), g.flat()[~g.flat_mask()])))
    assert [r.zeta for r in recs] == pytest.approx([0.8, 0.2, ZETA_CAP])
    assert recs[2].zeta_raw == 1.0
    n = clients[0].student.params.prunable_size()
    for r, (frac, vals) in zip(recs, masks):
        assert abs(frac * n - r.zeta * n) <= 1
        assert np.all(vals == 0.0)
    for r in recs:
        assert r.delay_s == max(c.delay_s for c in r.clients)
        assert r.energy_j == pytest.approx(sum(c.energy_j for c in r.clients))
        assert r.mentor_loss is not None
    assert recs[0].payload_bits_per_client < recs[1].payload_bits_per_client


def test_round_loop_is_deterministic():
    def go(parallel):
        clients = _clients(2)
        s = FLSettings(rounds=2, epochs=1, parallel=parallel)
        recs = run_psfl(s, clients, sample_schedule(2, 2, 0, 25, seed=3))
        return [(r.zeta, r.energy_j, r.student_loss, r.mentor_loss) for r in recs], \
            clients[0].student.params.flat().tobytes()
    a = go(False)
    assert a == go(False)
    assert a == go(True)


def test_round_loop_preconditions():
    clients = _clients(2, use_mentor=False)
    sched = sample_schedule(2, 2, 0, 25, seed=0)
    with pytest.raises(ProtocolError):
        run_psfl(FLSettings(rounds=2), clients, sched)  # PLD without mentors
    with pytest.raises(ProtocolError):
        run_psfl(FLSettings(rounds=3, use_pld=False), clients, sched)
    with pytest.raises(ContractError):
        run_psfl(FLSettings(rounds=0, use_pld=False), clients, sched)


def test_round_abort_carries_completed_rounds():
    clients = _clients(2, use_mentor=False)
    name = "classifier.b"  # never pruned, so the mask cannot clear the poison

    def poison(record, g, cs):
        g[name].data[:] = np.nan

    with pytest.raises(RoundAbort) as info:
        run_psfl(FLSettings(rounds=3, epochs=1, use_pld=False), clients, sample_schedule(3, 2, 0, 25, seed=0),
                 on_round=poison)
    assert info.value.round == 1
    assert len(info.value.records) == 1


def _reference_fedavg(global_w, shards, snrs_by_round, epochs, lr, batch, seed, template):
    """Plain FedAvg written against the raw autodiff ops."""
    counts = np.array([len(s) for s in shards], dtype=float)
    w = {n: v.copy() for n, v in global_w.items()}
    for t, snrs in enumerate(snrs_by_round):
        locals_ = []
        for k, shard in enumerate(shards):
            model = template.copy()
            for n in w:
                model.params[n].data = w[n].copy()
            shuffle_ss, noise_ss, _ = np.random.SeedSequence([seed, t, k]).spawn(3)
            shuffle, noise = np.random.default_rng(shuffle_ss), np.random.default_rng(noise_ss)
            y_all = one_hot(shard.labels, shard.classes)
            for _ in range(epochs):
                order = shuffle.permutation(len(shard))
                for s in range(0, len(order), batch):
                    idx = order[s:s + batch]
                    ch = ChannelRealization.sample((len(idx), model.semantic_dim), snrs[k], noise)
                    out = model.forward(shard.images[idx], ch)
                    loss = add(cross_entropy(y_all[idx], out.y_hat), mse(shard.images[idx], out.m_hat))
                    g = gradients(loss, model.params.tensors)
                    for n, tns in model.params.items():
                        tns.data = tns.data - lr * g[n]
            locals_.append({n: tns.data for n, tns in model.params.items()})
        w = {n: sum(c * lw[n] for c, lw in zip(counts, locals_)) / counts.sum() for n in w}
    return w


def test_fedavg_loop_matches_independent_reference():
    clients = _clients(3, n=10, use_mentor=False)
    init = {n: t.data.copy() for n, t in clients[0].student.params.items()}
    template = clients[0].student.copy()
    sched = sample_schedule(2, 3, 0, 25, seed=7)
    final = {}
    s = FLSettings(rounds=2, epochs=2, lr=0.05, batch_size=4, use_pld=False, use_agp=False, training_seed=5)
    run_psfl(s, clients, sched, on_round=lambda r, g, cs: final.update(g.values()))
    ref = _reference_fedavg(init, [c.shard for c in clients], sched.draws, 2, 0.05, 4, 5, template)
    for n in ref:
        np.testing.assert_allclose(final[n], ref[n], rtol=1e-12, atol=1e-14, err_msg=n)
