"""Acceptance suite: one test per criterion, one verdict line each.

Run with `pytest tests/test_acceptance.py -v`; the verdict lines are echoed
in an "acceptance criteria" section of the terminal summary.
"""

import itertools
import time

import numpy as np
import pytest

from moesched.cli import SweepGrid, main
from moesched.collectives import WorldState, allgather, alltoall, \
    fused_combine, fused_dispatch, saa
from moesched.config import (
    ClusterSpec,
    MoEConfig,
    ParallelLayout,
    check_compatible,
    group_members,
)
from moesched.costs import (
    ALL_KEYS,
    KEY_A2A_EP,
    KEY_A2A_EPESP,
    KEY_AG_ESP,
    KEY_AG_MP,
    KEY_AR_ESP,
    KEY_OVERLAP,
    KEY_RS_ESP,
    AlphaBeta,
    CostProfile,
    fit_alpha_beta,
    select_schedule,
)
from moesched.dataplane import ExpertWeights, SCHEDULES, oracle_errors, run_schedule
from moesched.timing import (
    lower_collective,
    schedule_comm_times,
    simulate_plan,
    time_allgather,
    time_alltoall,
    time_saa,
    verify_inequalities,
)

from conftest import record_verdict
from test_collectives import combine_reference, dispatch_reference
from test_costs import sample_constrained_profile


def verdict(number: int, description: str, ok: bool) -> None:
    line = record_verdict(number, description, ok)
    print(line)
    assert ok, line


def equivalence_configs():
    """Seeded configurations covering every factorization with P <= 16."""
    configs = []
    seed = 0
    for world in (2, 4, 8, 16):
        for ep in (1, 2, 4, 8, 16):
            if world % ep:
                continue
            esp = world // ep
            for mp in (1, 2, 4, 8, 16):
                if world % mp:
                    continue
                for embed in (2, 4, 8):
                    for samples, seq in ((4, 8), (2, 8)):
                        seed += 1
                        experts = max(2, ep)
                        cfg = MoEConfig(
                            samples_per_rank=samples, seq_len=seq,
                            embed_dim=embed,
                            hidden_dim=esp * (2 if esp <= 4 else 1),
                            num_experts=experts, top_k=2,
                            capacity_factor=experts / 2)
                        layout = ParallelLayout(mp, ep, esp, world)
                        try:
                            check_compatible(cfg, layout)
                        except ValueError:
                            continue
                        configs.append((cfg, layout, seed))
    return configs


class TestCriterion1ScheduleEquivalence:
    def test_all_schedules_match_oracle(self):
        configs = equivalence_configs()
        assert len(configs) >= 200
        started = time.monotonic()
        worst = 0.0
        failures = 0
        for cfg, layout, seed in configs:
            cluster = ClusterSpec(1, layout.world_size, 4e-10, 4e-9)
            weights = ExpertWeights.generate(cfg, seed=seed)
            rng = np.random.default_rng(seed)
            inputs = rng.normal(size=(layout.world_size // layout.mp_size,
                                      cfg.tokens_per_rank, cfg.embed_dim))
            for schedule in SCHEDULES:
                result = run_schedule(schedule, cfg, layout, cluster, weights,
                                      inputs)
                err = oracle_errors(cfg, layout, weights, inputs, result)
                worst = max(worst, err)
                if err > 1e-9:
                    failures += 1
        elapsed = time.monotonic() - started
        verdict(1, f"schedule equivalence on {len(configs)} configs "
                   f"(worst err {worst:.2e}, {elapsed:.1f}s)",
                failures == 0 and elapsed < 60.0)


class TestCriterion2FusedEquivalences:
    def test_fused_collectives_match_pipelines(self):
        rng = np.random.default_rng(2)
        layouts = [ParallelLayout(1, ep, world // ep, world)
                   for world in (1, 2, 4, 8, 16)
                   for ep in (1, 2, 4, 8, 16) if world % ep == 0]
        worlds_checked = 0
        failures = 0
        for layout in layouts:
            trials = max(2, 110 // len(layouts)) + 8
            for _ in range(trials):
                n_dispatch = layout.ep_size * int(rng.integers(1, 5))
                world = WorldState([rng.normal(size=min(n_dispatch, 64))
                                    if n_dispatch <= 64 else
                                    rng.normal(size=n_dispatch)
                                    for _ in range(layout.world_size)])
                fused = fused_dispatch(world, layout)
                reference = dispatch_reference(world, layout)
                if not all(np.array_equal(a, b) for a, b in
                           zip(fused.buffers, reference.buffers)):
                    failures += 1
                n_combine = layout.world_size * int(rng.integers(1, 5))
                world2 = WorldState([rng.normal(size=n_combine)
                                     for _ in range(layout.world_size)])
                fused2 = fused_combine(world2, layout)
                reference2 = combine_reference(world2, layout)
                if not all(np.allclose(a, b, rtol=1e-12, atol=0) for a, b in
                           zip(fused2.buffers, reference2.buffers)):
                    failures += 1
                worlds_checked += 2
        verdict(2, f"fused dispatch/combine equivalences on {worlds_checked} "
                   f"random worlds across {len(layouts)} layouts",
                failures == 0 and worlds_checked >= 100)


class TestCriterion3Saa:
    def test_saa_data_and_time(self):
        rng = np.random.default_rng(3)
        data_ok = True
        for product, mp in itertools.product((1, 2, 4, 8), (1, 2, 4)):
            if product % mp:
                continue
            layout = ParallelLayout(mp, product, 1, product)
            world = WorldState([rng.normal(size=product * 2)
                                for _ in range(product)])
            expected = allgather(alltoall(world, layout, "ep_esp"),
                                 layout, "mp")
            got = saa(world, layout)
            data_ok &= all(np.array_equal(a, b)
                           for a, b in zip(got.buffers, expected.buffers))

        time_ok = True
        cluster = ClusterSpec(2, 4, 4e-10, 4e-9, 0.0)
        world_group = list(range(8))
        mp_group = [0, 1]
        for x in (64, 1024, 65536, 2 ** 20):
            plan_a2a = lower_collective("alltoall", world_group, x, cluster)
            plan_ag = lower_collective("allgather", mp_group, x / 8, cluster)
            sequential = (simulate_plan(plan_a2a, cluster)
                          + simulate_plan(plan_ag, cluster))
            overlapped = time_saa(plan_a2a, plan_ag, len(world_group), cluster)
            time_ok &= overlapped <= sequential
            time_ok &= overlapped < sequential  # both volumes positive
        plan_a2a = lower_collective("alltoall", world_group, 1024, cluster)
        empty_ag = lower_collective("allgather", [0], 16, cluster)
        time_ok &= (time_saa(plan_a2a, empty_ag, 8, cluster)
                    == pytest.approx(simulate_plan(plan_a2a, cluster)))
        verdict(3, "simultaneous alltoall+allgather: exact data, "
                   "pipelined time never exceeds sequential", data_ok and time_ok)


def inequality_combos():
    flat = lambda d: ClusterSpec(1, d, 4e-10, 4e-9, 0.0)
    multi = lambda n, d: ClusterSpec(n, d, 4e-10, 4e-9, 0.0)
    return [
        (flat(4), ParallelLayout(2, 2, 2, 4)),
        (flat(4), ParallelLayout(1, 4, 1, 4)),
        (flat(8), ParallelLayout(2, 4, 2, 8)),
        (flat(8), ParallelLayout(1, 2, 4, 8)),
        (flat(8), ParallelLayout(4, 8, 1, 8)),
        (flat(16), ParallelLayout(4, 8, 2, 16)),
        (flat(16), ParallelLayout(2, 4, 4, 16)),
        (flat(16), ParallelLayout(1, 1, 16, 16)),
        (multi(2, 2), ParallelLayout(2, 2, 2, 4)),   # the 4-GPU two-node shape
        (multi(2, 2), ParallelLayout(1, 2, 2, 4)),
        (multi(2, 4), ParallelLayout(2, 2, 4, 8)),
        (multi(2, 4), ParallelLayout(4, 4, 2, 8)),
        (multi(2, 4), ParallelLayout(1, 4, 2, 8)),
        (multi(4, 4), ParallelLayout(2, 8, 2, 16)),
        (multi(4, 4), ParallelLayout(4, 4, 4, 16)),
        (multi(4, 2), ParallelLayout(2, 4, 2, 8)),
        (multi(2, 8), ParallelLayout(2, 2, 8, 16)),
        (multi(2, 2), ParallelLayout(2, 2, 2, 4, esp_contiguous=False)),
        (multi(2, 4), ParallelLayout(2, 4, 2, 8, esp_contiguous=False)),
        (multi(4, 4), ParallelLayout(4, 4, 4, 16, esp_contiguous=False)),
        (multi(2, 8), ParallelLayout(1, 8, 2, 16, esp_contiguous=False)),
        (multi(4, 2), ParallelLayout(1, 2, 4, 8, esp_contiguous=False)),
    ]


class TestCriterion4InequalityOracle:
    def test_zero_violations_across_cases(self):
        sizes = [2 ** k for k in range(10, 25)]
        combos = inequality_combos()
        assert len(combos) >= 20
        total = 0
        violations = 0
        equality_exact = True
        cases_seen = set()
        for cluster, layout in combos:
            checks = verify_inequalities(cluster, layout, sizes)
            for check in checks:
                total += 1
                cases_seen.add(check.case)
                if not check.passed:
                    violations += 1
                if check.inequality.startswith("single_node"):
                    scale = max(abs(check.lhs), abs(check.rhs))
                    equality_exact &= abs(check.lhs - check.rhs) <= 1e-12 * scale
        ok = (violations == 0 and equality_exact
              and cases_seen == {"single_node", "esp_intra_node",
                                 "ep_intra_node"})
        verdict(4, f"{total} inequality checks over {len(combos)} placements "
                   f"(cases: {sorted(cases_seen)}), zero violations, "
                   f"single-node equality exact", ok)


class TestCriterion5FitFidelity:
    def test_noiseless_and_noisy_recovery(self):
        sizes = np.geomspace(2 ** 10, 2 ** 24, 24)
        ok = True
        for alpha, beta in ((6.64e-4, 5.38e-10), (1.09e-4, 7.14e-10)):
            ab = fit_alpha_beta([(x, alpha + beta * x) for x in sizes])
            ok &= abs(ab.alpha - alpha) / alpha <= 1e-6
            ok &= abs(ab.beta - beta) / beta <= 1e-6
            rng = np.random.default_rng(555)
            noisy = [(x, (alpha + beta * x) * (1 + 0.01 * rng.standard_normal()))
                     for x in sizes for _ in range(8)]
            ab_noisy = fit_alpha_beta(noisy)
            ok &= abs(ab_noisy.alpha - alpha) / alpha <= 0.05
            ok &= abs(ab_noisy.beta - beta) / beta <= 0.05
        verdict(5, "alpha-beta recovery exact on clean data, within 5% "
                   "under 1% noise", ok)


def fit_profile_from_simulation(cluster, layout):
    """Measure the simulator's collectives and fit one profile entry each."""
    sizes = [2 ** k for k in range(12, 25, 2)]
    world = group_members(layout, "ep_esp", 0)
    esp_group = group_members(layout, "esp", 0)
    ep_group = group_members(layout, "ep", 0)
    mp_group = group_members(layout, "mp", 0)
    profile = CostProfile()

    def fit(key, fn):
        profile.add(fit_alpha_beta([(x, max(fn(x), 0.0)) for x in sizes],
                                   collective=key[0], group=key[1])
                    if any(fn(x) > 0 for x in sizes) else
                    AlphaBeta(0.0, 1e-30, key[0], key[1]))

    fit(KEY_AG_ESP, lambda x: time_allgather(x, esp_group, cluster))
    fit(KEY_RS_ESP, lambda x: simulate_plan(
        lower_collective("reducescatter", esp_group, x, cluster), cluster))
    fit(KEY_AR_ESP, lambda x: simulate_plan(
        lower_collective("allreduce", esp_group, x, cluster), cluster))
    fit(KEY_A2A_EP, lambda x: time_alltoall(x, ep_group, cluster))
    fit(KEY_A2A_EPESP, lambda x: time_alltoall(x, world, cluster))
    fit(KEY_AG_MP, lambda x: time_allgather(x, mp_group, cluster))

    ratio = layout.mp_size / layout.esp_size

    def overlap_time(x):
        plan_a2a = lower_collective("alltoall", world, x, cluster)
        plan_ag = lower_collective("allgather", mp_group,
                                   x * ratio / max(layout.mp_size, 1), cluster)
        return (time_saa(plan_a2a, plan_ag, len(world), cluster)
                - time_allgather(x * ratio, mp_group, cluster))

    fit(KEY_OVERLAP, overlap_time)
    return profile


class TestCriterion6SelectorSoundness:
    def test_argmin_by_construction(self):
        rng = np.random.default_rng(600)
        ok = True
        for _ in range(10_000):
            profile = sample_constrained_profile(rng)
            esp = int(rng.choice([1, 2, 4]))
            ep = int(rng.choice([1, 2, 4, 8]))
            mp = int(rng.choice([m for m in (1, 2, 4) if (ep * esp) % m == 0]))
            cfg = MoEConfig(2, 64, 8, 8 * esp, max(2, ep), 2,
                            float(rng.choice([1.0, 1.2, 2.4])))
            layout = ParallelLayout(mp, ep, esp, ep * esp)
            report = select_schedule(cfg, layout, profile)
            expected = "s1" if report.t_s1 <= report.t_s2 else "s2"
            ok &= report.chosen == expected
        verdict(6, "selector returns the argmin on 10^4 random profiles "
                   "(tie to s1)", ok)

    def test_agreement_with_simulator_on_sweep(self):
        clusters = {8: ClusterSpec(1, 8, 4e-10, 4e-9, 0.0),
                    16: ClusterSpec(2, 8, 4e-10, 4e-9, 0.0),
                    32: ClusterSpec(4, 8, 4e-10, 4e-9, 0.0)}
        profiles: dict[tuple, CostProfile] = {}
        points, _ = SweepGrid().run()
        agree = 0
        disagree_close = 0
        disagree_far = 0
        sim_choices = {"s1": 0, "s2": 0}
        for _, cfg, layout in points:
            cluster = clusters[layout.world_size]
            key = (layout.world_size, layout.mp_size, layout.esp_size)
            if key not in profiles:
                profiles[key] = fit_profile_from_simulation(cluster, layout)
            report = select_schedule(cfg, layout, profiles[key])
            times = schedule_comm_times(cfg, layout, cluster)
            sim_choice = "s1" if times.s1 <= times.s2 else "s2"
            sim_choices[sim_choice] += 1
            if report.chosen == sim_choice:
                agree += 1
            else:
                gap = abs(report.t_s1 - report.t_s2)
                if gap < 0.05 * max(report.t_s1, report.t_s2):
                    disagree_close += 1
                else:
                    disagree_far += 1
        total = agree + disagree_close + disagree_far
        rate = agree / total
        # Guard against a trivial comparison: the simulator must genuinely
        # prefer each schedule on a meaningful share of the sweep.
        assert min(sim_choices.values()) > 0.1 * total, sim_choices
        verdict(6, f"selector agrees with simulated times on "
                   f"{rate:.1%} of {total} sweep points "
                   f"(all {disagree_close + disagree_far} disagreements "
                   f"within 5%: {disagree_far == 0})",
                rate >= 0.95 and disagree_far == 0)


class TestCriterion7ModelSpeedup:
    def test_speedup_floor_and_mp_monotonicity(self):
        points, _ = SweepGrid().run()
        rng = np.random.default_rng(700)
        full_profiles = [sample_constrained_profile(rng) for _ in range(3)]
        sampled_profiles = [sample_constrained_profile(rng) for _ in range(200)]
        point_sample = [points[int(i)] for i in
                        rng.choice(len(points), size=200, replace=False)]

        ok = True
        worst = np.inf
        for profile in full_profiles:
            for _, cfg, layout in points:
                report = select_schedule(cfg, layout, profile)
                speedup = report.t_baseline / min(report.t_s1, report.t_s2)
                worst = min(worst, speedup)
                ok &= speedup >= 1.0 - 1e-12
        for profile in sampled_profiles:
            for _, cfg, layout in point_sample:
                report = select_schedule(cfg, layout, profile)
                speedup = report.t_baseline / min(report.t_s1, report.t_s2)
                worst = min(worst, speedup)
                ok &= speedup >= 1.0 - 1e-12

        # Raising the tensor-parallel width from 2 to 4 never hurts.
        by_key = {}
        for _, cfg, layout in points:
            key = (layout.world_size, layout.esp_size, cfg.samples_per_rank,
                   cfg.seq_len, cfg.embed_dim, cfg.hidden_dim,
                   cfg.capacity_factor, layout.mp_size)
            by_key[key] = (cfg, layout)
        mono_ok = True
        for profile in full_profiles:
            for key, (cfg, layout) in by_key.items():
                if key[-1] != 2:
                    continue
                partner = by_key.get(key[:-1] + (4,))
                if partner is None:
                    continue
                cfg4, layout4 = partner
                r2 = select_schedule(cfg, layout, profile)
                r4 = select_schedule(cfg4, layout4, profile)
                s2x = r2.t_baseline / min(r2.t_s1, r2.t_s2)
                s4x = r4.t_baseline / min(r4.t_s1, r4.t_s2)
                mono_ok &= s4x >= s2x - 1e-12
        verdict(7, f"model speedup floor 1.0 holds (worst {worst:.4f}) and "
                   f"speedup is monotone in tensor width 2->4",
                ok and mono_ok)


class TestCriterion8Determinism:
    def test_cli_reruns_byte_identical(self, tmp_path, capsys):
        fit_csv = tmp_path / "samples.csv"
        lines = ["collective,group,elements,seconds"]
        for collective, group in ALL_KEYS:
            for x in (2 ** 12, 2 ** 16, 2 ** 20):
                lines.append(f"{collective},{group},{x},{1e-4 + 1e-9 * x:.15g}")
        fit_csv.write_text("\n".join(lines) + "\n")
        config = tmp_path / "exp.cfg"
        config.write_text(
            "B = 1\nL = 8\nM = 4\nH = 4\nE = 2\nk = 1\nf = 2.0\n"
            "N_MP = 2\nN_EP = 2\nN_ESP = 2\nnum_nodes = 2\n"
            "devices_per_node = 2\nbeta_intra = 4e-10\nbeta_inter = 4e-9\n"
            "alpha_link = 0.0\nseed = 5\n")
        profile = tmp_path / "profile.csv"
        assert main(["fit", "--input", str(fit_csv), "--out", str(profile)]) == 0

        ok = True
        jobs = [
            ["fit", "--input", str(fit_csv)],
            ["predict", "--config", str(config), "--profile", str(profile)],
            ["verify", "--config", str(config), "--sizes", "4096,65536"],
            ["sweep", "--profile", str(profile)],
        ]
        for argv in jobs:
            first = tmp_path / "first.out"
            second = tmp_path / "second.out"
            assert main(argv + ["--out", str(first)]) == 0
            capsys.readouterr()
            assert main(argv + ["--out", str(second)]) == 0
            capsys.readouterr()
            ok &= first.read_bytes() == second.read_bytes()

        assert main(["simulate", "--config", str(config), "--seed", "9"]) == 0
        run1 = capsys.readouterr().out
        assert main(["simulate", "--config", str(config), "--seed", "9"]) == 0
        run2 = capsys.readouterr().out
        ok &= run1 == run2
        verdict(8, "every command reproduces byte-identical output under a "
                   "fixed seed", ok)
