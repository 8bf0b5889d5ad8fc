"""Gradient-based fitting of a LinearHead on a toy scene.

The objective is ``render_l2`` (lift the original views, render them back into
the original rig) plus the cyclic term (lift ground-truth novel views, render
into the original rig, compare with render_l2 + lambda_p * perceptual). Novel
views are fixed inputs, so gradients reach the head only through lifting.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from src.config import SceneConfig
from src.gaussians import GaussianSet, LiftInputs, LinearHead, activate_params, activation_backward, gather_lift_inputs
from src.geometry import CameraRig, RigDelta, build_rig
from src.harness import build_scene, render_frame
from src.logger import log_losses
from src.losses import LAMBDA_PERCEPTUAL, PerceptualMetric, recon_term, recon_term_grad, total_loss
from src.pipeline import ReconstructionPipeline
from src.rasterizer import GaussianGrads, RenderSettings, rasterize_backward, rasterize_with_cache

logger = logging.getLogger(__name__)

TOY_SCENE = SceneConfig(
    n_objects=1,
    n_timesteps=1,
    ground_x_range=(0.0, 24.0),
    ground_half_width=12.0,
    ground_spacing=1.0,
    texture_amplitude=0.25,
    texture_period=6.0,
)


@dataclass
class Adam:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]):
        """Updates ``params`` in place."""
        self.t += 1
        for name, grad in grads.items():
            m = self.m.setdefault(name, np.zeros_like(grad))
            v = self.v.setdefault(name, np.zeros_like(grad))
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            m_hat = m / (1.0 - self.beta1**self.t)
            v_hat = v / (1.0 - self.beta2**self.t)
            params[name] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class FitProblem:
    rig: CameraRig
    original_images: np.ndarray
    original_inputs: LiftInputs
    novel_rig: CameraRig
    novel_inputs: LiftInputs
    settings: RenderSettings
    lambda_p: float = LAMBDA_PERCEPTUAL
    metric: Optional[PerceptualMetric] = None

    @property
    def n_features(self) -> int:
        return self.original_inputs.features.shape[1]


@dataclass
class FitResult:
    head: LinearHead
    history: List[float]

    @property
    def initial(self) -> float:
        return self.history[0]

    @property
    def final(self) -> float:
        return self.history[-1]


def build_fit_problem(
    seed: int = 0,
    delta: RigDelta = RigDelta(pitch_deg=3.0),
    width: int = 24,
    height: int = 20,
    focal: float = 20.0,
    settings: Optional[RenderSettings] = None,
    lambda_p: float = LAMBDA_PERCEPTUAL,
) -> FitProblem:
    """Single-camera toy scene with one box; ground truth comes from the tile renderer."""
    settings = settings or RenderSettings()
    scene = build_scene(seed, cfg=TOY_SCENE)
    rig = build_rig(1, width, height, focal)
    pipeline = ReconstructionPipeline(settings=settings, lambda_p=lambda_p)
    original = render_frame(scene, rig, RigDelta(), 0, settings, reference=False)
    novel = render_frame(scene, rig, delta, 0, settings, reference=False)
    return FitProblem(
        rig=original.rig,
        original_images=original.images,
        original_inputs=gather_lift_inputs(original.depth, pipeline.features(original.images), original.rig),
        novel_rig=novel.rig,
        novel_inputs=gather_lift_inputs(novel.depth, pipeline.features(novel.images), novel.rig),
        settings=settings,
        lambda_p=lambda_p,
    )


def _lift(head: LinearHead, inputs: LiftInputs):
    raw = head.predict(inputs.features, inputs.depth, inputs.pixel_size)
    params = activate_params(raw)
    gaussians = GaussianSet(
        inputs.means, params.scales, params.rotations, params.opacities, params.sh, inputs.cameras, inputs.pixels
    )
    return raw, gaussians


def _term_and_grad(head: LinearHead, inputs: LiftInputs, problem: FitProblem, lambda_p: float):
    """Mean image term over the original rig and its gradient w.r.t. the head parameters."""
    raw, gaussians = _lift(head, inputs)
    grads = GaussianGrads.zeros_like(gaussians)
    n_views = len(problem.rig)
    value = 0.0
    for cam, image in zip(problem.rig, problem.original_images):
        target, cache = rasterize_with_cache(gaussians, cam, settings=problem.settings)
        value += recon_term(target.color, image, lambda_p, problem.metric) / n_views
        upstream = recon_term_grad(target.color, image, lambda_p, problem.metric) / n_views
        grads += rasterize_backward(gaussians, cam, upstream, cache)
    raw_grad = activation_backward(raw, grads.scales, grads.rotations, grads.opacities, grads.sh)
    d_weight, d_bias = head.backward(inputs.features, inputs.depth, inputs.pixel_size, raw_grad)
    return value, d_weight, d_bias


def objective(head: LinearHead, problem: FitProblem):
    """Returns (render_l2, recon_cyclic, d_weight, d_bias) for the summed objective."""
    render_value, w1, b1 = _term_and_grad(head, problem.original_inputs, problem, 0.0)
    cyclic_value, w2, b2 = _term_and_grad(head, problem.novel_inputs, problem, problem.lambda_p)
    return render_value, cyclic_value, w1 + w2, b1 + b2


def fit_linear_head(
    problem: FitProblem,
    steps: int = 200,
    lr: float = 0.01,
    seed: int = 0,
    head: Optional[LinearHead] = None,
    log_path: Optional[str] = None,
) -> FitResult:
    """Adam on the head parameters; ``history`` holds the objective before every step
    plus the value after the last one."""
    rng = np.random.default_rng(seed)
    head = head or LinearHead.initialise(problem.n_features, 1, rng)
    params = {"weight": np.array(head.weight, dtype=np.float64), "bias": np.array(head.bias, dtype=np.float64)}
    optimiser = Adam(lr=lr)
    history = []
    for step in range(steps + 1):
        current = LinearHead(params["weight"], params["bias"], head.sh_degree)
        render_value, cyclic_value, d_weight, d_bias = objective(current, problem)
        report = total_loss({"render_l2": render_value, "recon_cyclic": cyclic_value}, {})
        history.append(report.total)
        if log_path is not None:
            log_losses(step, report.as_dict(), log_path)
        if step % 25 == 0:
            logger.info(f"fit step {step}: render_l2={render_value:.5f} cyclic={cyclic_value:.5f}")
        if step == steps:
            break
        optimiser.step(params, {"weight": d_weight, "bias": d_bias})
    final = LinearHead(params["weight"], params["bias"], head.sh_degree)
    logger.info(f"Fitted LinearHead: objective {history[0]:.5f} -> {history[-1]:.5f}")
    return FitResult(final, history)
