"""Univariable GWAS summary tables and the multivariable summary bundle.

The multivariable associations are regression coefficients on the whole
variant vector, ``var(Z)^{-1} cov(Z, trait)``, reported on the per-allele
scale of the input files. They are obtained from univariable associations
by a GLS mapping in standardized-variant units followed by a per-variant
rescaling back to allele units, so that an identity LD matrix leaves the
univariable betas untouched.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "SummaryDataError",
    "UnivariableGwasTables",
    "MultivariableSummary",
    "load_gwas_tables",
    "harmonize_variants",
    "build_multivariable_summary",
    "is_strand_ambiguous",
    "write_gwas_tables",
    "example_paths",
]

LD_CONDITION_LIMIT = 1e10
_COMPLEMENT = {"A": "T", "T": "A", "C": "G", "G": "C"}


class SummaryDataError(ValueError):
    """Raised for malformed, inconsistent or unusable summary-data inputs."""


@dataclass
class UnivariableGwasTables:
    """Per-variant univariable associations for K exposures and one outcome.

    Rows of every array follow ``variants``. ``outcome_effect_allele`` and
    ``outcome_other_allele`` hold the outcome file's coding, which may differ
    from the exposure coding until :func:`harmonize_variants` is applied.
    """

    variants: list[str]
    effect_allele: list[str]
    other_allele: list[str]
    exposure_beta: np.ndarray
    exposure_se: np.ndarray
    outcome_beta: np.ndarray
    outcome_se: np.ndarray
    ld: np.ndarray
    exposure_cor: np.ndarray
    n_X: float
    n_Y: float
    exposure_names: list[str] = field(default_factory=list)
    outcome_effect_allele: list[str] | None = None
    outcome_other_allele: list[str] | None = None

    def __post_init__(self):
        self.exposure_beta = np.atleast_2d(np.asarray(self.exposure_beta, dtype=float))
        if self.exposure_beta.shape[0] != len(self.variants):
            self.exposure_beta = self.exposure_beta.T
        self.exposure_se = np.asarray(self.exposure_se, dtype=float).reshape(self.exposure_beta.shape)
        self.outcome_beta = np.asarray(self.outcome_beta, dtype=float).ravel()
        self.outcome_se = np.asarray(self.outcome_se, dtype=float).ravel()
        self.ld = np.atleast_2d(np.asarray(self.ld, dtype=float))
        self.exposure_cor = np.atleast_2d(np.asarray(self.exposure_cor, dtype=float))
        if not self.exposure_names:
            self.exposure_names = [f"exposure{k + 1}" for k in range(self.K)]
        if self.outcome_effect_allele is None:
            self.outcome_effect_allele = list(self.effect_allele)
        if self.outcome_other_allele is None:
            self.outcome_other_allele = list(self.other_allele)
        self.validate()

    @property
    def J(self) -> int:
        return len(self.variants)

    @property
    def K(self) -> int:
        return self.exposure_beta.shape[1]

    def validate(self) -> None:
        J, K = self.J, self.K
        if len(set(self.variants)) != J:
            raise SummaryDataError("duplicate variant identifiers")
        if self.outcome_beta.shape != (J,) or self.outcome_se.shape != (J,):
            raise SummaryDataError("outcome vectors do not match the variant list")
        if self.ld.shape != (J, J):
            raise SummaryDataError(f"dimension error: LD matrix has shape {self.ld.shape}, expected ({J}, {J})")
        if self.exposure_cor.shape != (K, K):
            raise SummaryDataError(
                f"dimension error: exposure correlation has shape {self.exposure_cor.shape}, expected ({K}, {K})"
            )
        if not (np.all(self.exposure_se > 0) and np.all(self.outcome_se > 0)):
            raise SummaryDataError("nonpositive standard error")
        for name, mat in (("LD", self.ld), ("exposure correlation", self.exposure_cor)):
            if not np.allclose(mat, mat.T, atol=1e-8):
                raise SummaryDataError(f"{name} matrix is not symmetric")
            if not np.allclose(np.diag(mat), 1.0, atol=1e-8):
                raise SummaryDataError(f"{name} matrix does not have a unit diagonal")

    def subset(self, indices: Sequence[int]) -> "UnivariableGwasTables":
        """Tables restricted to the variants at ``indices`` (in that order)."""
        idx = list(indices)
        return replace(
            self,
            variants=[self.variants[i] for i in idx],
            effect_allele=[self.effect_allele[i] for i in idx],
            other_allele=[self.other_allele[i] for i in idx],
            exposure_beta=self.exposure_beta[idx],
            exposure_se=self.exposure_se[idx],
            outcome_beta=self.outcome_beta[idx],
            outcome_se=self.outcome_se[idx],
            ld=self.ld[np.ix_(idx, idx)],
            outcome_effect_allele=[self.outcome_effect_allele[i] for i in idx],
            outcome_other_allele=[self.outcome_other_allele[i] for i in idx],
        )


@dataclass
class MultivariableSummary:
    """Multivariable associations and their covariances on the sqrt(n_X) scale.

    ``Sigma_gamma`` is indexed by the column-stacked ``vec(gamma_hat)``, so
    block ``(k, m)`` is ``Sigma_gamma[k*J:(k+1)*J, m*J:(m+1)*J]``.
    """

    Gamma_hat: np.ndarray
    gamma_hat: np.ndarray
    Sigma_Gamma: np.ndarray
    Sigma_gamma: np.ndarray
    n_X: float
    n_Y: float

    def __post_init__(self):
        self.Gamma_hat = np.asarray(self.Gamma_hat, dtype=float).ravel()
        J = self.Gamma_hat.shape[0]
        self.gamma_hat = np.asarray(self.gamma_hat, dtype=float).reshape(J, -1)
        self.Sigma_Gamma = np.asarray(self.Sigma_Gamma, dtype=float).reshape(J, J)
        JK = J * self.gamma_hat.shape[1]
        self.Sigma_gamma = np.asarray(self.Sigma_gamma, dtype=float).reshape(JK, JK)
        if self.K > J:
            raise SummaryDataError(f"need J >= K, got J={J}, K={self.K}")

    @property
    def J(self) -> int:
        return self.gamma_hat.shape[0]

    @property
    def K(self) -> int:
        return self.gamma_hat.shape[1]

    @property
    def c(self) -> float:
        return self.n_X / self.n_Y

    @property
    def blocks(self) -> np.ndarray:
        """``Sigma_gamma`` as a (K, K, J, J) array of J x J blocks."""
        J, K = self.J, self.K
        return self.Sigma_gamma.reshape(K, J, K, J).transpose(0, 2, 1, 3)

    def permuted(self, order: Sequence[int]) -> "MultivariableSummary":
        """Same summary with the variants taken in ``order``."""
        return self.transformed(np.eye(self.J)[list(order)])

    def transformed(self, T: np.ndarray) -> "MultivariableSummary":
        """Apply an invertible J x J map to every moment: Gamma -> T Gamma etc."""
        K = self.K
        TK = np.kron(np.eye(K), T)
        return MultivariableSummary(
            Gamma_hat=T @ self.Gamma_hat,
            gamma_hat=T @ self.gamma_hat,
            Sigma_Gamma=T @ self.Sigma_Gamma @ T.T,
            Sigma_gamma=TK @ self.Sigma_gamma @ TK.T,
            n_X=self.n_X,
            n_Y=self.n_Y,
        )


# ---------------------------------------------------------------------------
# file input


def _read_tsv(path: str | Path) -> list[tuple[int, list[str]]]:
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh, delimiter="\t"), start=1):
            row = [cell.strip() for cell in row]
            if not row or all(cell == "" for cell in row) or row[0].startswith("#"):
                continue
            rows.append((lineno, row))
    if not rows:
        raise SummaryDataError(f"{path}: empty file")
    return rows


def _to_float(token: str, path, lineno: int) -> float:
    try:
        return float(token)
    except ValueError:
        raise SummaryDataError(f"{path}, line {lineno}: parse error, cannot read {token!r} as a number") from None


def _is_numeric(token: str) -> bool:
    try:
        float(token)
    except ValueError:
        return False
    return True


def _read_matrix(path, labels: Sequence[str] | None = None) -> tuple[np.ndarray, list[str] | None]:
    rows = _read_tsv(path)
    header = None
    if not all(_is_numeric(tok) for tok in rows[0][1]):
        header = rows[0][1]
        rows = rows[1:]
    mat = np.array([[_to_float(tok, path, ln) for tok in row] for ln, row in rows]) if rows else np.zeros((0, 0))
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise SummaryDataError(f"dimension error: {path} is not a square matrix")
    if header is not None and len(header) != mat.shape[0]:
        raise SummaryDataError(f"dimension error: {path} header has {len(header)} names for a {mat.shape[0]}-square matrix")
    if header is not None and labels is not None:
        missing = [v for v in labels if v not in header]
        if missing:
            raise SummaryDataError(f"variant mismatch: missing from {path}: {', '.join(missing)}")
        pos = [header.index(v) for v in labels]
        mat = mat[np.ix_(pos, pos)]
    return mat, header


def load_gwas_tables(exposure_path, outcome_path, ld_path, exposure_cor_path, n_X, n_Y) -> UnivariableGwasTables:
    """Read the four TSV inputs into a :class:`UnivariableGwasTables`.

    The exposure file fixes the variant order. Outcome rows are matched by
    variant id; an LD header row, if present, is used to reorder the matrix.
    """
    exp_rows = _read_tsv(exposure_path)
    (_, header), body = exp_rows[0], exp_rows[1:]
    if header[:3] != ["variant", "effect_allele", "other_allele"]:
        raise SummaryDataError(f"{exposure_path}: header must start with variant, effect_allele, other_allele")
    names = []
    for i in range(3, len(header), 2):
        b, s = header[i], header[i + 1] if i + 1 < len(header) else ""
        if not (b.startswith("beta_") and s == "se_" + b[5:]):
            raise SummaryDataError(f"{exposure_path}: expected beta_<name>/se_<name> column pairs, got {b!r}, {s!r}")
        names.append(b[5:])
    if not names:
        raise SummaryDataError(f"{exposure_path}: no exposure columns")

    variants, ea, oa, betas, ses = [], [], [], [], []
    for lineno, row in body:
        if len(row) != len(header):
            raise SummaryDataError(f"{exposure_path}, line {lineno}: expected {len(header)} fields, got {len(row)}")
        variants.append(row[0])
        ea.append(row[1].upper())
        oa.append(row[2].upper())
        vals = [_to_float(tok, exposure_path, lineno) for tok in row[3:]]
        betas.append(vals[0::2])
        ses.append(vals[1::2])
    if len(set(variants)) != len(variants):
        raise SummaryDataError(f"{exposure_path}: duplicate variant identifiers")

    out_rows = _read_tsv(outcome_path)
    (_, oheader), obody = out_rows[0], out_rows[1:]
    if oheader[:5] != ["variant", "effect_allele", "other_allele", "beta", "se"]:
        raise SummaryDataError(f"{outcome_path}: header must be variant, effect_allele, other_allele, beta, se")
    outcome = {}
    for lineno, row in obody:
        if len(row) < 5:
            raise SummaryDataError(f"{outcome_path}, line {lineno}: expected 5 fields, got {len(row)}")
        outcome[row[0]] = (
            row[1].upper(),
            row[2].upper(),
            _to_float(row[3], outcome_path, lineno),
            _to_float(row[4], outcome_path, lineno),
        )
    missing = [v for v in variants if v not in outcome]
    if missing:
        raise SummaryDataError(f"variant mismatch: missing from {outcome_path}: {', '.join(missing)}")

    ld, _ = _read_matrix(ld_path, labels=variants)
    if ld.shape[0] != len(variants):
        raise SummaryDataError(f"dimension error: LD matrix is {ld.shape[0]}-square but there are {len(variants)} variants")
    cor, _ = _read_matrix(exposure_cor_path)

    return UnivariableGwasTables(
        variants=variants,
        effect_allele=ea,
        other_allele=oa,
        exposure_beta=np.array(betas),
        exposure_se=np.array(ses),
        outcome_beta=np.array([outcome[v][2] for v in variants]),
        outcome_se=np.array([outcome[v][3] for v in variants]),
        ld=ld,
        exposure_cor=cor,
        n_X=float(n_X),
        n_Y=float(n_Y),
        exposure_names=names,
        outcome_effect_allele=[outcome[v][0] for v in variants],
        outcome_other_allele=[outcome[v][1] for v in variants],
    )


# ---------------------------------------------------------------------------
# harmonization


def _complement(allele: str) -> str:
    return "".join(_COMPLEMENT.get(ch, "?") for ch in reversed(allele))


def is_strand_ambiguous(effect: str, other: str) -> bool:
    """True for A/T and C/G variants whose strand cannot be inferred."""
    return len(effect) == 1 and _complement(effect) == other


def harmonize_variants(
    tables: UnivariableGwasTables, allow_ambiguous: bool = False, flip_ld: bool = True
) -> UnivariableGwasTables:
    """Align outcome associations to the exposure effect alleles.

    Outcome betas for variants whose outcome coding is swapped (directly or
    after a strand flip) are negated. With ``flip_ld`` the LD matrix is taken
    to follow the outcome coding and its rows/columns are negated to match.
    Strand-ambiguous variants raise unless ``allow_ambiguous`` is set, in
    which case they are compared literally and a warning is emitted.
    """
    flips = np.ones(tables.J)
    for j, v in enumerate(tables.variants):
        E, O = tables.effect_allele[j], tables.other_allele[j]
        e, o = tables.outcome_effect_allele[j], tables.outcome_other_allele[j]
        if is_strand_ambiguous(E, O):
            if not allow_ambiguous:
                raise SummaryDataError(f"unharmonizable variant {v}: strand-ambiguous alleles {E}/{O}")
            warnings.warn(f"strand-ambiguous variant {v} harmonized without strand check", stacklevel=2)
            if (e, o) == (E, O):
                continue
            if (e, o) == (O, E):
                flips[j] = -1.0
                continue
            raise SummaryDataError(f"unharmonizable variant {v}: exposure {E}/{O}, outcome {e}/{o}")
        if (e, o) in ((E, O), (_complement(E), _complement(O))):
            continue
        if (e, o) in ((O, E), (_complement(O), _complement(E))):
            flips[j] = -1.0
            continue
        raise SummaryDataError(f"unharmonizable variant {v}: exposure {E}/{O}, outcome {e}/{o}")

    ld = tables.ld * np.outer(flips, flips) if flip_ld else tables.ld.copy()
    return replace(
        tables,
        outcome_beta=tables.outcome_beta * flips,
        ld=ld,
        outcome_effect_allele=list(tables.effect_allele),
        outcome_other_allele=list(tables.other_allele),
    )


# ---------------------------------------------------------------------------
# multivariable construction


def _symmetrize(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + M.T)


def _repair_pd(M: np.ndarray, name: str) -> np.ndarray:
    M = _symmetrize(M)
    dim = M.shape[0]
    floor = 1e-10 * np.trace(M) / dim
    lam_min = np.linalg.eigvalsh(M)[0]
    if lam_min < floor:
        ridge = floor - lam_min if lam_min < 0 else floor
        warnings.warn(f"{name} near-singular (smallest eigenvalue {lam_min:.3g}); adding ridge {ridge:.3g}", stacklevel=3)
        M = M + ridge * np.eye(dim)
        if np.linalg.eigvalsh(M)[0] <= 0:
            raise SummaryDataError(f"invalid covariance: {name} is not positive definite")
    return M


def build_multivariable_summary(tables: UnivariableGwasTables) -> MultivariableSummary:
    """Map harmonized univariable tables to a :class:`MultivariableSummary`.

    With ``s`` the standard errors of one univariable regression, betas are
    put on standardized-variant units ``b / (s sqrt(n))``, regressed jointly
    through ``R^{-1}`` and mapped back to allele units. The result is
    ``S R^{-1} S^{-1} b`` for the point estimate and ``n_X S_k R^{-1} S_m``
    (times the exposure correlation for exposure pairs) for the covariances.
    """
    R = tables.ld
    if np.linalg.cond(R) > LD_CONDITION_LIMIT:
        raise SummaryDataError("ill-conditioned LD matrix")
    if np.linalg.eigvalsh(_symmetrize(R))[0] <= 0:
        raise SummaryDataError("ill-conditioned LD matrix: not positive definite")
    if np.linalg.eigvalsh(_symmetrize(tables.exposure_cor))[0] <= 0:
        raise SummaryDataError("exposure correlation matrix is not positive definite")
    R_inv = _symmetrize(np.linalg.inv(R))
    J, K = tables.J, tables.K
    n_X = tables.n_X

    def to_multivariable(beta, se, n):
        z = beta / (se * np.sqrt(n))
        return se * np.sqrt(n) * (R_inv @ z)

    Gamma = to_multivariable(tables.outcome_beta, tables.outcome_se, tables.n_Y)
    gamma = np.column_stack(
        [to_multivariable(tables.exposure_beta[:, k], tables.exposure_se[:, k], n_X) for k in range(K)]
    )
    s_out = tables.outcome_se
    Sigma_Gamma = n_X * (s_out[:, None] * R_inv * s_out[None, :])

    Sigma_gamma = np.empty((J * K, J * K))
    for k in range(K):
        for m in range(K):
            sk, sm = tables.exposure_se[:, k], tables.exposure_se[:, m]
            Sigma_gamma[k * J:(k + 1) * J, m * J:(m + 1) * J] = (
                tables.exposure_cor[k, m] * n_X * (sk[:, None] * R_inv * sm[None, :])
            )

    return MultivariableSummary(
        Gamma_hat=Gamma,
        gamma_hat=gamma,
        Sigma_Gamma=_repair_pd(Sigma_Gamma, "Sigma_Gamma"),
        Sigma_gamma=_repair_pd(Sigma_gamma, "Sigma_gamma"),
        n_X=n_X,
        n_Y=tables.n_Y,
    )


# ---------------------------------------------------------------------------
# file output


def _fmt_row(values) -> str:
    return "\t".join(v if isinstance(v, str) else repr(float(v)) for v in values)


def write_gwas_tables(tables: UnivariableGwasTables, directory, prefix: str = "") -> dict[str, Path]:
    """Write the four TSV inputs read by :func:`load_gwas_tables`.

    Outcome rows keep the outcome allele coding stored in ``tables``. Returns
    the paths keyed as ``exposures``, ``outcome``, ``ld`` and ``exposure_cor``.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {key: directory / f"{prefix}{key}.tsv" for key in ("exposures", "outcome", "ld", "exposure_cor")}
    header = ["variant", "effect_allele", "other_allele"]
    for name in tables.exposure_names:
        header += [f"beta_{name}", f"se_{name}"]
    lines = ["\t".join(header)]
    for j, v in enumerate(tables.variants):
        cells = [v, tables.effect_allele[j], tables.other_allele[j]]
        for k in range(tables.K):
            cells += [tables.exposure_beta[j, k], tables.exposure_se[j, k]]
        lines.append(_fmt_row(cells))
    paths["exposures"].write_text("\n".join(lines) + "\n")
    lines = ["variant\teffect_allele\tother_allele\tbeta\tse"]
    for j, v in enumerate(tables.variants):
        lines.append(_fmt_row([v, tables.outcome_effect_allele[j], tables.outcome_other_allele[j],
                               tables.outcome_beta[j], tables.outcome_se[j]]))
    paths["outcome"].write_text("\n".join(lines) + "\n")
    lines = ["\t".join(tables.variants)] + [_fmt_row(row) for row in tables.ld]
    paths["ld"].write_text("\n".join(lines) + "\n")
    paths["exposure_cor"].write_text("\n".join(_fmt_row(row) for row in tables.exposure_cor) + "\n")
    return paths


def example_paths(name: str = "strong") -> dict[str, Path]:
    """Paths of a packaged example dataset (``strong``: well-identified synthetic data)."""
    from importlib import resources

    base = resources.files("mvmr_weakiv") / "data"
    return {key: Path(str(base / f"{name}_{key}.tsv")) for key in ("exposures", "outcome", "ld", "exposure_cor")}
