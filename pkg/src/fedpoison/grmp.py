"""Graph-representation attack pipeline.

Four stages: (1) embed benign updates in a similarity graph, (2) learn its
manifold with a variational graph autoencoder, (3) search latent space with a
dual-ascent scheme that trades adjacency disruption against a cosine stealth
floor, (4) re-express the benign spectral content in the adversarial graph's
Laplacian basis and blend in the poison direction.

Everything is dense numpy; node counts are tiny (one node per client), so the
eigendecompositions are effectively free.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from fedpoison.defense import cosine


@dataclass
class UpdateGraph:
    X: np.ndarray  # n x d node features (rows = flattened updates)
    A: np.ndarray  # n x n symmetric {0,1}, zero diagonal
    tau_edge: float


@dataclass
class VgaeParams:
    W0: np.ndarray  # d x h
    W_mu: np.ndarray  # h x k
    W_logvar: np.ndarray  # h x k

    @property
    def hidden(self) -> int:
        return self.W0.shape[1]

    @property
    def latent(self) -> int:
        return self.W_mu.shape[1]


@dataclass
class LatentState:
    Z: np.ndarray  # n x k
    A_hat: np.ndarray  # n x n decoded edge probabilities


@dataclass
class DualState:
    lambda_dual: float
    stealth_floor: float
    iterate: LatentState


@dataclass
class SpectralDecomposition:
    L: np.ndarray
    U: np.ndarray  # columns = eigenvectors, ascending eigenvalue order
    Lambda: np.ndarray
    S_hat: np.ndarray  # U^T X spectral coefficients


@dataclass
class GrmpConfig:
    tau_edge: float = 0.3
    stealth_floor: float = 0.3
    auto_floor: bool = True  # estimate floor as tau_estimate + stealth_margin
    stealth_margin: float = 0.05
    gamma_blend: float = 1.0
    poison_epochs: int = 10  # attacker-side epochs distilling the poison direction
    dual_steps: int = 100
    dual_step_size: float = 0.05
    hidden: int = 32
    latent: int = 8
    vgae_epochs: int = 200
    vgae_lr: float = 0.01
    knowledge: str = "full"  # or "own_plus_global"
    window: int = 4  # rounds of estimated updates stacked in estimation mode


# ---------------------------------------------------------------------------
# graph construction

def build_update_graph(updates: np.ndarray, tau_edge: float) -> UpdateGraph:
    """Node per update; edge where pairwise cosine >= tau_edge."""
    X = np.asarray(updates, dtype=float)
    n = len(X)
    if n < 2:
        raise ValueError("update graph needs n >= 2")
    A = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            if cosine(X[i], X[j]) >= tau_edge:
                A[i, j] = A[j, i] = 1.0
    return UpdateGraph(X=X, A=A, tau_edge=tau_edge)


def _normalized_adjacency(A: np.ndarray) -> np.ndarray:
    """Symmetric normalization of A + I."""
    A_tilde = A + np.eye(len(A))
    dinv = 1.0 / np.sqrt(A_tilde.sum(axis=1))
    return A_tilde * dinv[:, None] * dinv[None, :]


# ---------------------------------------------------------------------------
# VGAE forward / loss / gradients

def init_vgae(d: int, h: int, k: int, seed: int) -> VgaeParams:
    """Xavier-uniform initialization."""
    if not k <= h <= d:
        raise ValueError(f"need latent <= hidden <= d (got {k}, {h}, {d})")
    rng = np.random.default_rng(seed)

    def xavier(fan_in, fan_out):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-lim, lim, size=(fan_in, fan_out))

    return VgaeParams(W0=xavier(d, h), W_mu=xavier(h, k), W_logvar=xavier(h, k))


def vgae_encode(params: VgaeParams, g: UpdateGraph) -> tuple[np.ndarray, np.ndarray]:
    """Two-layer GCN producing per-node Gaussian mean and log-variance."""
    if g.X.shape[1] != params.W0.shape[0]:
        raise ValueError(
            f"feature dim {g.X.shape[1]} != encoder input dim {params.W0.shape[0]}"
        )
    An = _normalized_adjacency(g.A)
    H = np.maximum(An @ g.X @ params.W0, 0.0)
    M = An @ H
    return M @ params.W_mu, M @ params.W_logvar


def vgae_decode(Z: np.ndarray) -> np.ndarray:
    """Inner-product decoder: sigmoid(Z Z^T), symmetric by construction."""
    S = Z @ Z.T
    return 1.0 / (1.0 + np.exp(-S))


_CLIP = 1e-7


def _recon_weight(A: np.ndarray) -> float:
    n = len(A)
    edges = A.sum()  # off-diagonal by invariant
    non_edges = n * (n - 1) - edges
    return float(non_edges / edges) if edges > 0 else 1.0


def recon_bce(A_hat: np.ndarray, A: np.ndarray) -> float:
    """Edge-weighted binary cross-entropy over off-diagonal entries."""
    n = len(A)
    if n < 2:
        return 0.0
    p = np.clip(A_hat, _CLIP, 1.0 - _CLIP)
    w = _recon_weight(A)
    off = ~np.eye(n, dtype=bool)
    terms = -(w * A * np.log(p) + (1.0 - A) * np.log(1.0 - p))
    return float(terms[off].mean())


def vgae_loss(
    A_hat: np.ndarray, A: np.ndarray, mu: np.ndarray, logvar: np.ndarray
) -> tuple[float, float, float]:
    """(total, reconstruction BCE, KL to the standard normal)."""
    recon = recon_bce(A_hat, A)
    kl = -0.5 * float(np.mean(1.0 + logvar - mu**2 - np.exp(logvar)))
    return recon + kl, recon, kl


def _recon_grad_wrt_Z(A_hat: np.ndarray, A: np.ndarray, Z: np.ndarray) -> np.ndarray:
    """d recon_bce / dZ through the inner-product decoder."""
    n = len(A)
    p = np.clip(A_hat, _CLIP, 1.0 - _CLIP)
    w = _recon_weight(A)
    M = n * (n - 1)
    dp = (-(w * A / p) + (1.0 - A) / (1.0 - p)) / M
    off = ~np.eye(n, dtype=bool)
    dp = dp * off
    unclamped = (A_hat > _CLIP) & (A_hat < 1.0 - _CLIP)
    dS = dp * A_hat * (1.0 - A_hat) * unclamped
    return (dS + dS.T) @ Z


def vgae_loss_and_grads(
    params: VgaeParams, g: UpdateGraph, eps: np.ndarray
) -> tuple[tuple[float, float, float], dict[str, np.ndarray]]:
    """Forward pass with a fixed reparameterization draw eps, plus analytic
    gradients w.r.t. all three weight matrices."""
    An = _normalized_adjacency(g.A)
    AX = An @ g.X
    Hpre = AX @ params.W0
    H = np.maximum(Hpre, 0.0)
    M = An @ H
    mu = M @ params.W_mu
    logvar = M @ params.W_logvar
    std = np.exp(0.5 * logvar)
    Z = mu + std * eps
    A_hat = vgae_decode(Z)
    losses = vgae_loss(A_hat, g.A, mu, logvar)

    n, k = mu.shape
    N = n * k
    dZ = _recon_grad_wrt_Z(A_hat, g.A, Z)
    dmu = dZ + mu / N
    dlogvar = dZ * eps * 0.5 * std + (np.exp(logvar) - 1.0) / (2.0 * N)
    dW_mu = M.T @ dmu
    dW_logvar = M.T @ dlogvar
    dM = dmu @ params.W_mu.T + dlogvar @ params.W_logvar.T
    dH = An @ dM  # An symmetric
    dHpre = dH * (Hpre > 0.0)
    dW0 = AX.T @ dHpre
    return losses, {"W0": dW0, "W_mu": dW_mu, "W_logvar": dW_logvar}


def fit_vgae(
    graphs: list[UpdateGraph], h: int, k: int, epochs: int, lr: float, seed: int
) -> VgaeParams:
    """Full-batch gradient descent on the summed ELBO over the given graphs."""
    if not graphs:
        raise ValueError("need at least one graph")
    d = graphs[0].X.shape[1]
    for g in graphs:
        if g.X.shape[1] != d:
            raise ValueError("all graphs must share the feature dimension")
    params = init_vgae(d, h, k, seed)
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        acc = {"W0": 0.0, "W_mu": 0.0, "W_logvar": 0.0}
        for g in graphs:
            eps = rng.standard_normal((len(g.X), k))
            _, grads = vgae_loss_and_grads(params, g, eps)
            for key in acc:
                acc[key] = acc[key] + grads[key]
        params.W0 -= lr * acc["W0"]
        params.W_mu -= lr * acc["W_mu"]
        params.W_logvar -= lr * acc["W_logvar"]
    return params


# ---------------------------------------------------------------------------
# adversarial latent search

def threshold_adjacency(A_hat: np.ndarray) -> np.ndarray:
    """Binarize decoded edge probabilities at 0.5, zero diagonal; any isolated
    node gets back its single highest-probability edge."""
    n = len(A_hat)
    A = (A_hat > 0.5).astype(float)
    np.fill_diagonal(A, 0.0)
    A = np.maximum(A, A.T)
    for i in range(n):
        if A[i].sum() == 0:
            probs = A_hat[i].copy()
            probs[i] = -np.inf
            j = int(np.argmax(probs))
            A[i, j] = A[j, i] = 1.0
    return A


def lagrange_dual_search(
    params: VgaeParams,
    g: UpdateGraph,
    reference: np.ndarray,
    stealth_floor: float,
    steps: int,
    step_size: float,
) -> tuple[DualState, np.ndarray]:
    """Dual-ascent search for an adversarial adjacency.

    Primal: gradient ascent on the reconstruction BCE of the decoded adjacency
    against the benign one, penalized (once the multiplier grows) by a pull
    back toward the encoder mean whenever the synthesized update's cosine to
    the reference drops below the stealth floor. Dual: multiplier ascent on
    the constraint violation. The thresholded decode is piecewise constant in
    Z, so the pull-back toward the benign latent serves as the constraint
    subgradient.

    Returns the best iterate that kept the cosine within 0.05 of the floor
    (falling back to the last iterate if none did) and its binarized adjacency.
    """
    if not -1.0 <= stealth_floor <= 1.0:
        raise ValueError("stealth_floor must lie in [-1, 1]")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    mu0, _ = vgae_encode(params, g)
    decomp = gsp_decompose(g)
    Z = mu0.copy()
    lam = 0.0
    best: Optional[tuple[float, np.ndarray]] = None

    def evaluate(Zc: np.ndarray) -> tuple[float, float, np.ndarray]:
        A_hat = vgae_decode(Zc)
        A_adv = threshold_adjacency(A_hat)
        X_syn = gsp_synthesize(decomp, A_adv)
        c = cosine(X_syn.mean(axis=0), reference)
        return recon_bce(A_hat, g.A), c, A_hat

    for t in range(steps):
        recon, c, A_hat = evaluate(Z)
        if not (np.isfinite(recon) and np.isfinite(c)):
            raise FloatingPointError(f"non-finite dual objective at step {t}")
        if c >= stealth_floor - 0.05 and (best is None or recon > best[0]):
            best = (recon, Z.copy())
        grad = _recon_grad_wrt_Z(A_hat, g.A, Z)
        viol = max(0.0, stealth_floor - c)
        if viol > 0.0 and lam > 0.0:
            pull = mu0 - Z
            norm = np.linalg.norm(pull)
            if norm > 0:
                grad = grad + lam * viol * pull / norm
        Z = Z + step_size * grad
        lam = max(0.0, lam + step_size * (stealth_floor - c))

    Z_final = best[1] if best is not None else Z
    A_hat = vgae_decode(Z_final)
    A_adv = threshold_adjacency(A_hat)
    state = DualState(
        lambda_dual=lam,
        stealth_floor=stealth_floor,
        iterate=LatentState(Z=Z_final, A_hat=A_hat),
    )
    return state, A_adv


# ---------------------------------------------------------------------------
# graph signal processing

def _fix_signs(U: np.ndarray) -> np.ndarray:
    """Per column, make the largest-magnitude entry (lowest index on ties)
    positive, so spectral bases are reproducible."""
    U = U.copy()
    for j in range(U.shape[1]):
        i = int(np.argmax(np.abs(U[:, j])))
        if U[i, j] < 0:
            U[:, j] = -U[:, j]
    return U


def _laplacian_basis(A: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    L = np.diag(A.sum(axis=1)) - A
    Lambda, U = np.linalg.eigh(L)
    return L, _fix_signs(U), Lambda


def gsp_decompose(g: UpdateGraph) -> SpectralDecomposition:
    """Laplacian eigenbasis of the benign graph plus the spectral coefficients
    of the stacked updates."""
    if len(g.X) < 2:
        raise ValueError("need n >= 2 nodes")
    L, U, Lambda = _laplacian_basis(g.A)
    return SpectralDecomposition(L=L, U=U, Lambda=Lambda, S_hat=U.T @ g.X)


def gsp_synthesize(decomp: SpectralDecomposition, A_adv: np.ndarray) -> np.ndarray:
    """Benign spectral coefficients re-expressed in the adversarial graph's
    Laplacian basis (an orthonormal change of basis, so energy is conserved)."""
    _, U_adv, _ = _laplacian_basis(np.asarray(A_adv, dtype=float))
    return U_adv @ decomp.S_hat


# ---------------------------------------------------------------------------
# malicious update synthesis

def project_stealth(
    v: np.ndarray, reference: np.ndarray, stealth_floor: float, norm_cap: float
) -> np.ndarray:
    """Minimal correction enforcing cosine(v, reference) >= stealth_floor and
    ||v|| <= norm_cap.

    If the cosine floor is violated, add the smallest alpha >= 0 multiple of
    the reference that reaches it (closed form from the parallel/orthogonal
    split); norm violations are fixed by uniform rescaling, which preserves
    the cosine.
    """
    r_norm = np.linalg.norm(reference)
    if r_norm == 0:
        raise ValueError("reference direction has zero norm")
    out = v.astype(float).copy()
    if cosine(out, reference) < stealth_floor:
        if stealth_floor >= 1.0 - 1e-12:
            out = np.linalg.norm(out) * reference / r_norm
        else:
            r_hat = reference / r_norm
            par = float(out @ r_hat)
            orth = float(np.linalg.norm(out - par * r_hat))
            target_par = stealth_floor * orth / np.sqrt(1.0 - stealth_floor**2)
            alpha = max(0.0, (target_par - par) / r_norm)
            out = out + alpha * reference
    norm = np.linalg.norm(out)
    if norm > norm_cap > 0:
        out *= norm_cap / norm
    return out


def craft_with_trace(
    benign_updates: np.ndarray,
    raw_poison: np.ndarray,
    reference: np.ndarray,
    cfg: GrmpConfig,
    params: VgaeParams,
) -> tuple[np.ndarray, dict]:
    """Full pipeline: graph -> dual search -> spectral synthesis -> blend ->
    stealth projection. Returns the flat malicious delta plus a trace dict."""
    benign_updates = np.asarray(benign_updates, dtype=float)
    if not np.all(np.isfinite(raw_poison)):
        raise ValueError("raw_poison must be finite")
    g = build_update_graph(benign_updates, cfg.tau_edge)
    decomp = gsp_decompose(g)
    mu0, _ = vgae_encode(params, g)
    recon_initial = recon_bce(vgae_decode(mu0), g.A)
    state, A_adv = lagrange_dual_search(
        params, g, reference, cfg.stealth_floor, cfg.dual_steps, cfg.dual_step_size
    )
    X_syn = gsp_synthesize(decomp, A_adv)
    candidate = X_syn.mean(axis=0) + cfg.gamma_blend * raw_poison
    norm_cap = float(np.max(np.linalg.norm(benign_updates, axis=1)))
    final = project_stealth(candidate, reference, cfg.stealth_floor, norm_cap)
    trace = {
        "recon_bce_initial": recon_initial,
        "recon_bce_final": recon_bce(state.iterate.A_hat, g.A),
        "lambda_dual": state.lambda_dual,
        "stealth_cosine": cosine(final, reference),
        "edges_flipped": int(np.abs(A_adv - g.A).sum() // 2),
    }
    return final, trace


def craft_malicious_update(
    benign_updates: np.ndarray,
    raw_poison: np.ndarray,
    reference: np.ndarray,
    cfg: GrmpConfig,
    params: VgaeParams,
) -> np.ndarray:
    final, _ = craft_with_trace(benign_updates, raw_poison, reference, cfg, params)
    return final


# ---------------------------------------------------------------------------
# attacker observation channel

@dataclass
class RoundObservation:
    n_clients: int
    benign_updates: Optional[np.ndarray] = None  # full-knowledge channel
    global_delta: Optional[np.ndarray] = None  # applied aggregate this round
    own_updates: Optional[np.ndarray] = None  # attacker submissions this round


def collect_benign_observations(
    history: list[RoundObservation], knowledge: str
) -> tuple[list[np.ndarray], dict]:
    """Per-round benign update matrices as seen through the chosen channel.

    "full" passes the benign updates straight through. "own_plus_global"
    reconstructs one pseudo-benign row per round from the global delta and the
    attacker's own submissions; that reconstruction is exact under equal-weight
    FedAvg and biased under any selective rule, which the metadata flags.
    """
    if not history:
        raise ValueError("empty observation history")
    if knowledge == "full":
        mats = []
        for obs in history:
            if obs.benign_updates is None:
                raise ValueError("full knowledge requested but benign updates missing")
            mats.append(np.asarray(obs.benign_updates, dtype=float))
        return mats, {"mode": "full", "estimated": False}
    if knowledge == "own_plus_global":
        mats = []
        for obs in history:
            if obs.global_delta is None or obs.own_updates is None:
                raise ValueError("estimation mode needs global deltas and own updates")
            own = np.atleast_2d(np.asarray(obs.own_updates, dtype=float))
            n_benign = obs.n_clients - len(own)
            if n_benign < 1:
                raise ValueError("no benign clients to estimate")
            est = (obs.n_clients * obs.global_delta - own.sum(axis=0)) / n_benign
            mats.append(est[None, :])
        return mats, {
            "mode": "own_plus_global",
            "estimated": True,
            "unbiased_under": "equal-weight fedavg",
        }
    raise ValueError(f"unknown knowledge mode {knowledge!r}")
