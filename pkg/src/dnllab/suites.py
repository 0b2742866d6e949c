"""Registry of the verification suites behind the ``check`` command.

Each suite maps ``(seed, instances)`` to one or more
:class:`~dnllab.analysis.IdentityReport` rows. The CLI iterates this
registry, so a suite added here is automatically exposed; a completeness
test pins the registry against the analysis ops it must cover.
"""

import numpy as np

from . import analysis, blocks
from .analysis import IdentityReport

# identity-suite tolerances (acceptance-grade)
IDENTITY_TOL = 1e-10
GRAD_NORM_TOL = 1e-6
IMPROVE_TOL = 1e-9
EIG_SLACK = 1e-8
TRACE_TOL = 1e-10
ROW_SUM_TOL = 1e-9
COUPLING_TOL = 1e-9


def _spread_instances(count: int, seed: int):
    """Non-degenerate random instances for the centering/eigen suites."""
    for idx in range(count):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 7000 + idx]))
        n = int(rng.integers(3, 9))
        dim = int(rng.integers(2, 4))
        yield rng.normal(size=(dim, n)), rng.normal(size=(dim, n))


def whitening_suite(seed: int, instances: int) -> list[IdentityReport]:
    reports = [analysis.whiten_reconstruction_check(Q, K, tol=IDENTITY_TOL)
               for Q, K in analysis.random_embedding_instances(instances, seed)]
    return [analysis.merge_reports("whitening-reconstruction", reports)]


def elimination_suite(seed: int, instances: int) -> list[IdentityReport]:
    reports = [analysis.elimination_check(Q, K, tol=IDENTITY_TOL)
               for Q, K in analysis.random_embedding_instances(instances, seed)]
    return [analysis.merge_reports("shift-elimination", reports)]


def factorization_suite(seed: int, instances: int) -> list[IdentityReport]:
    reports = [analysis.factorization_check(Q, K, tol=IDENTITY_TOL)[0]
               for Q, K in analysis.random_embedding_instances(instances, seed)]
    return [analysis.merge_reports("product-factorization", reports)]


def centering_suite(seed: int, instances: int) -> list[IdentityReport]:
    count = min(instances, 100)
    worst_grad = 0.0
    worst_improvement = 0.0
    for idx, (Q, K) in enumerate(_spread_instances(count, seed)):
        verdict = analysis.mean_optimality_oracle(
            Q, K, trials=1000, radius=0.5, seed=seed * 100_003 + idx,
            grad_tol=GRAD_NORM_TOL, improve_tol=IMPROVE_TOL,
        )
        worst_grad = max(worst_grad, verdict.grad_norm)
        worst_improvement = max(worst_improvement, verdict.max_improvement)
    return [
        IdentityReport("centering-stationarity", worst_grad, count,
                       GRAD_NORM_TOL, worst_grad <= GRAD_NORM_TOL),
        IdentityReport("centering-perturbation", worst_improvement, count,
                       IMPROVE_TOL, worst_improvement <= IMPROVE_TOL),
    ]


def eigen_suite(seed: int, instances: int) -> list[IdentityReport]:
    count = min(instances, 50)
    worst_excess = 0.0
    worst_structure = 0.0
    ok = True
    for Q, K in _spread_instances(count, seed):
        for m in (Q, K):
            rep = analysis.gram_eigen_bound(m, eig_slack=EIG_SLACK, trace_tol=TRACE_TOL)
            worst_excess = max(worst_excess, rep.max_eigenvalue - 1.0)
            worst_structure = max(worst_structure, rep.trace_error,
                                  max(-rep.min_eigenvalue, 0.0))
            ok = ok and rep.symmetric
    return [
        IdentityReport("gram-eigen-bound", max(worst_excess, 0.0), count,
                       EIG_SLACK, worst_excess <= EIG_SLACK and ok),
        IdentityReport("gram-trace-psd", worst_structure, count,
                       TRACE_TOL, worst_structure <= TRACE_TOL and ok),
    ]


def coupling_suite(seed: int, instances: int) -> list[IdentityReport]:
    count = min(instances, 50)
    worst = 0.0
    sum_exact = True
    for idx in range(count):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 8000 + idx]))
        channels = int(rng.choice([4, 8]))
        side = int(rng.choice([2, 3]))
        x = rng.normal(size=(channels, side, side))
        params = blocks.init_block_params(
            channels, blocks.Variant.NL, np.random.default_rng(
                np.random.SeedSequence([seed, 8500 + idx]))
        )
        report = analysis.coupling_gradient_probe(x, params, seed=seed + idx)
        worst = max(worst, report.product_rule_max_dev,
                    report.product_rule_max_dev_unary)
        sum_exact = sum_exact and report.sum_rule_exact
    return [IdentityReport("gradient-coupling", worst, count, COUPLING_TOL,
                           worst <= COUPLING_TOL and sum_exact)]


ROW_SUM_CHANNELS = (4, 8, 16)
ROW_SUM_PIXELS = (1, 4, 16, 49)


def row_sum_suite(seed: int, instances: int) -> list[IdentityReport]:
    count = min(instances, 200)
    worst = 0.0
    structure_ok = True
    for idx in range(count):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 9000 + idx]))
        channels = ROW_SUM_CHANNELS[idx % len(ROW_SUM_CHANNELS)]
        n = ROW_SUM_PIXELS[(idx // len(ROW_SUM_CHANNELS)) % len(ROW_SUM_PIXELS)]
        side_h, side_w = (1, n) if int(np.sqrt(n)) ** 2 != n else (int(np.sqrt(n)),) * 2
        x = rng.normal(size=(channels, side_h, side_w))
        for variant in blocks.VARIANTS:
            params = blocks.init_block_params(channels, variant, rng)
            if params.Wm is not None:
                params.Wm[:] = rng.normal(size=params.Wm.shape)
            emb = blocks.compute_embeddings(x, params, variant)
            decomp = blocks.attention(variant, emb)
            worst = max(worst, blocks.row_sum_errors(variant, decomp))
            if variant is blocks.Variant.UNARY_NL:
                structure_ok = structure_ok and bool(
                    np.array_equal(decomp.total,
                                   np.repeat(decomp.unary_norm[None, :], n, axis=0))
                )
            if variant in (blocks.Variant.DNL, blocks.Variant.DNL_DAGGER):
                structure_ok = structure_ok and bool(
                    np.array_equal(decomp.total,
                                   decomp.pairwise_norm + decomp.unary_norm[None, :])
                )
    return [IdentityReport("attention-row-sums", worst, count, ROW_SUM_TOL,
                           worst <= ROW_SUM_TOL and structure_ok)]


SUITES = {
    "whitening-reconstruction": whitening_suite,
    "shift-elimination": elimination_suite,
    "product-factorization": factorization_suite,
    "centering-optimality": centering_suite,
    "gram-eigen-bound": eigen_suite,
    "gradient-coupling": coupling_suite,
    "attention-row-sums": row_sum_suite,
}


def run_all(seed: int = 1, instances: int = 500) -> list[IdentityReport]:
    reports = []
    for runner in SUITES.values():
        reports.extend(runner(seed, instances))
    return reports
