"""Finite structural causal model of a bilateral image pair.

Graph::

    C -> Z_T, Z_R
    (C, Z_u) -> Y_u -> H_u -> X_u      for u in {T, R}, C a parent of every node

Every node except ``C`` owns an exogenous noise variable with a finite
distribution; a structural function is a lookup table indexed by
``[c_index, parent_index, noise_index]``. Queries are answered by exact
enumeration of all ``(C, noise)`` worlds, so no sampling error enters the
counterfactual checks.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

NODES = ("C", "Z_T", "Z_R", "Y_T", "Y_R", "H_T", "H_R", "X_T", "X_R")
NOISE_NODES = NODES[1:]
# axis of each noise variable in the world grid; axis 0 is C
_AXIS = {name: i + 1 for i, name in enumerate(NOISE_NODES)}
_PROB_TOL = 1e-12


class ScmValidationError(ValueError):
    pass


class ImpossibleEvidenceError(ValueError):
    pass


class SymmetricPriorViolation(ValueError):
    def __init__(self, message, world):
        super().__init__(message)
        self.world = world


@dataclass(frozen=True)
class Evidence:
    """Observation of the target side on the abstract site: ``H_T = h_t``, ``Z_T = z_t``."""

    h_t: int
    z_t: int


@dataclass(frozen=True)
class DiscreteDistribution:
    support: tuple
    mass: tuple

    def __post_init__(self):
        if len(self.support) != len(self.mass):
            raise ValueError("support and mass differ in length")
        if any(m < 0 for m in self.mass):
            raise ValueError("negative probability mass")
        if abs(sum(self.mass) - 1.0) > 1e-9:
            raise ValueError(f"masses sum to {sum(self.mass)!r}, not 1")

    def as_dict(self):
        return dict(zip(self.support, self.mass))

    def prob(self, value):
        return self.as_dict().get(value, 0.0)


def point_mass(value) -> DiscreteDistribution:
    return DiscreteDistribution((value,), (1.0,))


def total_variation(p: DiscreteDistribution, q: DiscreteDistribution) -> float:
    pd, qd = p.as_dict(), q.as_dict()
    return 0.5 * sum(abs(pd.get(v, 0.0) - qd.get(v, 0.0)) for v in set(pd) | set(qd))


@dataclass(frozen=True, eq=False)
class ScmSpec:
    """Domains, noise tables and lookup tables of the bilateral SCM.

    Table shapes (``nc = len(domain_C)``, ``nu[node]`` = noise cardinality):

    ``f_Z_*``: ``(nc, nu)`` values in {0, 1}
    ``f_Y_*``: ``(nc, 2, nu)`` indexed by Z, values in {0, 1}
    ``f_H_*``: ``(nc, 2, nu)`` indexed by Y, values in ``domain_H``
    ``f_X_*``: ``(nc, len(domain_H), nu)`` indexed by position of H, values in ``domain_X``
    """

    domain_C: tuple
    prior_C: tuple
    domain_H: tuple
    domain_X: tuple
    noise: dict
    tables: dict
    shared_mechanisms: bool = True
    name: str = field(default="", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "domain_C", tuple(int(v) for v in self.domain_C))
        object.__setattr__(self, "prior_C", tuple(float(v) for v in self.prior_C))
        object.__setattr__(self, "domain_H", tuple(int(v) for v in self.domain_H))
        object.__setattr__(self, "domain_X", tuple(int(v) for v in self.domain_X))
        object.__setattr__(
            self, "noise", {k: tuple(float(p) for p in self.noise[k]) for k in NOISE_NODES if k in self.noise}
        )
        object.__setattr__(
            self, "tables", {k: np.asarray(v, dtype=np.int64) for k, v in self.tables.items()}
        )
        self.validate()

    def __eq__(self, other):
        if not isinstance(other, ScmSpec):
            return NotImplemented
        a, b = self.to_dict(), other.to_dict()
        a.pop("name")
        b.pop("name")
        return a == b

    __hash__ = None

    # -- validation -------------------------------------------------------

    def validate(self):
        nc = len(self.domain_C)
        nh = len(self.domain_H)
        if nc == 0 or nh == 0 or len(self.domain_X) == 0:
            raise ScmValidationError("domains must be nonempty")
        for name, dom in (("domain_C", self.domain_C), ("domain_H", self.domain_H), ("domain_X", self.domain_X)):
            if len(set(dom)) != len(dom):
                raise ScmValidationError(f"{name} has repeated values")
        _check_probs("prior_C", self.prior_C, nc)
        for node in NOISE_NODES:
            if node not in self.noise:
                raise ScmValidationError(f"noise table for {node} missing")
            _check_probs(f"noise[{node}]", self.noise[node], None)

        allowed = {
            "Z": ((nc,), {0, 1}),
            "Y": ((nc, 2), {0, 1}),
            "H": ((nc, 2), set(self.domain_H)),
            "X": ((nc, nh), set(self.domain_X)),
        }
        for node in NOISE_NODES:
            key = f"f_{node}"
            if key not in self.tables:
                raise ScmValidationError(f"lookup table {key} missing")
            table = self.tables[key]
            lead, values = allowed[node[0]]
            expected = lead + (len(self.noise[node]),)
            if table.shape != expected:
                raise ScmValidationError(f"lookup table {key} has shape {table.shape}, expected {expected}")
            bad = set(np.unique(table).tolist()) - values
            if bad:
                raise ScmValidationError(f"lookup table {key} contains values {sorted(bad)} outside its domain")

        if self.shared_mechanisms:
            for base in ("Y", "H", "X"):
                t, r = f"{base}_T", f"{base}_R"
                if self.noise[t] != self.noise[r]:
                    raise ScmValidationError(f"shared_mechanisms set but noise[{t}] != noise[{r}]")
                if not np.array_equal(self.tables[f"f_{t}"], self.tables[f"f_{r}"]):
                    raise ScmValidationError(f"shared_mechanisms set but f_{t} != f_{r}")

    # -- world enumeration --------------------------------------------------

    @cached_property
    def _grid(self):
        """Node values and prior weight of every (C, noise) world, as broadcast arrays."""
        nc = len(self.domain_C)
        shape = (nc,) + tuple(len(self.noise[n]) for n in NOISE_NODES)
        ndim = len(shape)

        def along(axis, values):
            s = [1] * ndim
            s[axis] = len(values)
            return np.asarray(values).reshape(s)

        c = along(0, np.arange(nc))
        u = {n: along(_AXIS[n], np.arange(len(self.noise[n]))) for n in NOISE_NODES}
        weight = along(0, self.prior_C)
        for n in NOISE_NODES:
            weight = weight * along(_AXIS[n], self.noise[n])
        weight = np.broadcast_to(weight, shape)

        h_index = {v: i for i, v in enumerate(self.domain_H)}
        h_lookup = np.zeros(max(self.domain_H) - min(self.domain_H) + 1, dtype=np.int64)
        for v, i in h_index.items():
            h_lookup[v - min(self.domain_H)] = i

        values = {"C": np.broadcast_to(np.asarray(self.domain_C)[c], shape)}
        for side in ("T", "R"):
            z = self.tables[f"f_Z_{side}"][c, u[f"Z_{side}"]]
            y = self.tables[f"f_Y_{side}"][c, z, u[f"Y_{side}"]]
            h = self.tables[f"f_H_{side}"][c, y, u[f"H_{side}"]]
            x = self.tables[f"f_X_{side}"][c, h_lookup[h - min(self.domain_H)], u[f"X_{side}"]]
            for name, arr in (("Z", z), ("Y", y), ("H", h), ("X", x)):
                values[f"{name}_{side}"] = np.broadcast_to(arr, shape)
        return {"shape": shape, "c": c, "u": u, "weight": weight, "values": values}

    def world_values(self):
        return self._grid["values"]

    def world_weights(self):
        return self._grid["weight"]

    # -- serialization ---------------------------------------------------------

    def to_dict(self):
        return {
            "name": self.name,
            "domain_C": list(self.domain_C),
            "prior_C": list(self.prior_C),
            "domain_H": list(self.domain_H),
            "domain_X": list(self.domain_X),
            "noise": {k: list(v) for k, v in self.noise.items()},
            "tables": {k: v.tolist() for k, v in self.tables.items()},
            "shared_mechanisms": self.shared_mechanisms,
        }

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(
                domain_C=d["domain_C"],
                prior_C=d["prior_C"],
                domain_H=d["domain_H"],
                domain_X=d["domain_X"],
                noise=d["noise"],
                tables=d["tables"],
                shared_mechanisms=bool(d.get("shared_mechanisms", False)),
                name=d.get("name", ""),
            )
        except KeyError as exc:
            raise ScmValidationError(f"spec is missing field {exc.args[0]!r}") from None

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2)

    def save(self, path):
        Path(path).write_text(self.dumps() + "\n")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def _check_probs(name, probs, length):
    p = np.asarray(probs, dtype=float)
    if length is not None and p.shape != (length,):
        raise ScmValidationError(f"{name} has {p.size} entries, expected {length}")
    if p.size == 0:
        raise ScmValidationError(f"{name} is empty")
    if np.any(p < 0):
        raise ScmValidationError(f"{name} has negative probabilities")
    if abs(p.sum() - 1.0) > _PROB_TOL:
        raise ScmValidationError(f"{name} sums to {p.sum()!r}, not 1")


# -- queries -------------------------------------------------------------------


def sample_world(spec: ScmSpec, seed: int) -> dict:
    """Draw one full assignment by sampling C and every noise variable."""
    rng = np.random.default_rng(seed)
    idx = [rng.choice(len(spec.prior_C), p=spec.prior_C)]
    idx += [rng.choice(len(spec.noise[n]), p=spec.noise[n]) for n in NOISE_NODES]
    values = spec.world_values()
    return {name: int(values[name][tuple(idx)]) for name in NODES}


def _distribution(values, weights) -> DiscreteDistribution:
    total = weights.sum()
    support = np.unique(values[weights > 0])
    mass = [weights[values == v].sum() / total for v in support]
    return DiscreteDistribution(tuple(int(v) for v in support), tuple(float(m) for m in mass))


def _posterior_weights(spec: ScmSpec, evidence: Evidence):
    values = spec.world_values()
    match = (values["H_T"] == evidence.h_t) & (values["Z_T"] == evidence.z_t)
    w = np.where(match, spec.world_weights(), 0.0)
    if not w.sum() > 0:
        raise ImpossibleEvidenceError(
            f"impossible evidence: P(H_T={evidence.h_t}, Z_T={evidence.z_t}) = 0 under spec {spec.name!r}"
        )
    return w


def conditional_distribution(spec: ScmSpec, evidence: Evidence, node: str) -> DiscreteDistribution:
    """Exact posterior of ``node`` given the evidence."""
    if node not in NODES:
        raise KeyError(f"unknown node {node!r}; expected one of {NODES}")
    w = _posterior_weights(spec, evidence)
    return _distribution(spec.world_values()[node], w)


def counterfactual_distribution(spec: ScmSpec, evidence: Evidence, intervention_z: int) -> DiscreteDistribution:
    """P(H_T under do(Z_T = intervention_z) | evidence) by abduction, action, prediction.

    Abduction weights each (C, noise) world by its posterior; the action sets
    Z_T; prediction re-evaluates Y_T and H_T with the abducted C and noise.
    """
    if intervention_z not in (0, 1):
        raise ValueError("intervention_z must be 0 or 1")
    w = _posterior_weights(spec, evidence)
    g = spec._grid
    c, u = g["c"], g["u"]
    y = spec.tables["f_Y_T"][c, intervention_z, u["Y_T"]]
    h = spec.tables["f_H_T"][c, y, u["H_T"]]
    return _distribution(np.broadcast_to(h, g["shape"]), w)


def evidence_values(spec: ScmSpec, z_t: int):
    """All ``h_t`` with ``P(H_T = h_t, Z_T = z_t) > 0``."""
    values = spec.world_values()
    w = spec.world_weights()
    sel = (values["Z_T"] == z_t) & (w > 0)
    return sorted(int(v) for v in np.unique(values["H_T"][sel]))


def audit_symmetric_prior(spec: ScmSpec):
    """Return a positive-probability world with Z_T = 1 and Z_R = 1, or None."""
    values = spec.world_values()
    bad = (values["Z_T"] == 1) & (values["Z_R"] == 1) & (spec.world_weights() > 0)
    if not bad.any():
        return None
    idx = tuple(int(i) for i in np.argwhere(bad)[0])
    world = {name: int(values[name][idx]) for name in NODES}
    world["noise_index"] = dict(zip(NOISE_NODES, idx[1:]))
    return world


@dataclass(frozen=True)
class TheoremReport:
    tv_eq2: float
    tv_eq3: float
    passed: bool
    tolerance: float
    worst_evidence_eq2: int | None
    n_lesion_evidence: int
    n_lesion_free_evidence: int
    per_evidence_tv_eq2: dict

    def record(self):
        return {
            "tv_eq2": self.tv_eq2,
            "tv_eq3": self.tv_eq3,
            "pass": self.passed,
            "tolerance": self.tolerance,
            "worst_evidence_h_t": self.worst_evidence_eq2,
            "n_lesion_evidence": self.n_lesion_evidence,
            "n_lesion_free_evidence": self.n_lesion_free_evidence,
        }


def verify_theorem1(spec: ScmSpec, tolerance: float = 1e-9) -> TheoremReport:
    """Check both counterfactual identities over every possible evidence value.

    Lesion site (``z_t = 1``): the counterfactual target under ``do(Z_T = 0)``
    must match the posterior of ``H_R``. Lesion-free site (``z_t = 0``): it
    must be the point mass at the observed ``h_t``. Reports the worst total
    variation distance of each.
    """
    violation = audit_symmetric_prior(spec)
    if violation is not None:
        raise SymmetricPriorViolation(
            f"symmetric prior violated: world {violation} has Z_T=1 and Z_R=1", violation
        )
    lesion = evidence_values(spec, 1)
    healthy = evidence_values(spec, 0)
    if not lesion:
        raise ValueError("spec never produces Z_T = 1; nothing to verify")

    per_ev = {}
    for h_t in lesion:
        ev = Evidence(h_t, 1)
        per_ev[h_t] = total_variation(
            counterfactual_distribution(spec, ev, 0), conditional_distribution(spec, ev, "H_R")
        )
    tv3 = 0.0
    for h_t in healthy:
        tv3 = max(tv3, total_variation(counterfactual_distribution(spec, Evidence(h_t, 0), 0), point_mass(h_t)))
    worst = max(per_ev, key=per_ev.get)
    tv2 = per_ev[worst]
    return TheoremReport(
        tv_eq2=float(tv2),
        tv_eq3=float(tv3),
        passed=bool(tv2 <= tolerance and tv3 <= tolerance),
        tolerance=tolerance,
        worst_evidence_eq2=worst,
        n_lesion_evidence=len(lesion),
        n_lesion_free_evidence=len(healthy),
        per_evidence_tv_eq2=per_ev,
    )


# -- random specs ----------------------------------------------------------------


def _random_probs(rng, n, floor=0.05):
    p = rng.dirichlet(np.ones(n)) + floor
    return p / p.sum()


def random_compliant_spec(rng, n_c=None, n_h=None, n_x=3, noise_card=2) -> ScmSpec:
    """A spec satisfying the symmetric prior with shared T/R mechanisms.

    All randomness of Y and H is routed through C (their noise tables are
    point masses), which is what lets the counterfactual target depend on C
    alone. Z and X sides carry genuine noise.
    """
    n_c = int(n_c or rng.integers(2, 5))
    n_h = int(n_h or rng.integers(2, 6))
    domain_H = tuple(range(n_h))
    domain_X = tuple(range(n_x))

    f_z_t = rng.integers(0, 2, size=(n_c, noise_card))
    f_z_t[0, :] = 1  # at least one C value can show a lesion
    f_z_r = rng.integers(0, 2, size=(n_c, noise_card))
    f_z_r[f_z_t.any(axis=1)] = 0  # Z_T can be 1 for this c -> Z_R is 0 for every noise
    f_y = rng.integers(0, 2, size=(n_c, 2, 1))
    f_h = rng.integers(0, n_h, size=(n_c, 2, 1))
    f_x = rng.integers(0, n_x, size=(n_c, n_h, noise_card))

    x_noise = _random_probs(rng, noise_card)
    noise = {
        "Z_T": _random_probs(rng, noise_card),
        "Z_R": _random_probs(rng, noise_card),
        "Y_T": [1.0],
        "Y_R": [1.0],
        "H_T": [1.0],
        "H_R": [1.0],
        "X_T": x_noise,
        "X_R": x_noise,
    }
    tables = {
        "f_Z_T": f_z_t,
        "f_Z_R": f_z_r,
        "f_Y_T": f_y,
        "f_Y_R": f_y.copy(),
        "f_H_T": f_h,
        "f_H_R": f_h.copy(),
        "f_X_T": f_x,
        "f_X_R": f_x.copy(),
    }
    return ScmSpec(
        domain_C=tuple(range(n_c)),
        prior_C=_random_probs(rng, n_c),
        domain_H=domain_H,
        domain_X=domain_X,
        noise=noise,
        tables=tables,
        shared_mechanisms=True,
        name="random-compliant",
    )


def break_shared_mechanism(spec: ScmSpec, rng) -> ScmSpec:
    """Perturb one reachable entry of the R-side H table (negative control).

    The entry chosen is ``f_H_R[c, f_Y_R(c, 0)]`` for the C value carrying the
    largest posterior mass under some lesion evidence, so the reference
    posterior provably moves.
    """
    if len(spec.domain_H) < 2:
        raise ValueError("need |H| >= 2 to perturb an H table")
    best = None
    for h_t in evidence_values(spec, 1):
        post_c = conditional_distribution(spec, Evidence(h_t, 1), "C").as_dict()
        c_val, mass = max(post_c.items(), key=lambda kv: kv[1])
        if best is None or mass > best[1]:
            best = (c_val, mass)
    c_idx = spec.domain_C.index(best[0])
    tables = {k: v.copy() for k, v in spec.tables.items()}
    y0 = int(tables["f_Y_R"][c_idx, 0, 0])
    current = int(tables["f_H_R"][c_idx, y0, 0])
    choices = [v for v in spec.domain_H if v != current]
    tables["f_H_R"][c_idx, y0, :] = int(rng.choice(choices))
    return ScmSpec(
        domain_C=spec.domain_C,
        prior_C=spec.prior_C,
        domain_H=spec.domain_H,
        domain_X=spec.domain_X,
        noise=spec.noise,
        tables=tables,
        shared_mechanisms=False,
        name="broken-lemma",
    )


def enumerate_worlds(spec: ScmSpec):
    """Yield ``(weight, assignment)`` for every world; slow reference path for tests."""
    values = spec.world_values()
    weights = spec.world_weights()
    for idx in itertools.product(*(range(n) for n in weights.shape)):
        yield float(weights[idx]), {name: int(values[name][idx]) for name in NODES}
