"""Full pose model wiring prompts, decoders, fusion and the keypoint head together."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from ppap.backbone import HeatmapTarget, ImageEncoder, KeypointHead, PixelProjector
from ppap.config import TrainConfig
from ppap.fusion import build_fusion, fuse_heuristic, score_maps
from ppap.objectives import LossBreakdown, feature_loss, pred_loss, spatial_loss, total_loss
from ppap.prob_prompt import (PromptDistribution, TextDecoder, VisualTextDecoder, prompt_loss,
                              sample_prompts)
from ppap.prompt_bank import KeypointVocab, build_prompt_set, build_text_encoder

FEATURE_STRIDE = 8


@dataclass
class ModelOutput:
    feat: torch.Tensor  # (B, C_feat, H', W')
    pix: torch.Tensor  # (B, H'W', C_emb)
    full: torch.Tensor  # (K, N_p, C_emb)
    agnostic: torch.Tensor  # (K, N_p, C_emb)
    mu: torch.Tensor  # (K, N_p, C_emb)
    sigma: torch.Tensor  # (B, K, N_p, C_emb)
    stack: torch.Tensor  # (B, N_s, K, H', W')
    score: torch.Tensor  # (B, K, H', W')
    heatmaps: torch.Tensor  # (B, K, 4H', 4W')


class PPAPModel(nn.Module):
    def __init__(self, cfg: TrainConfig, vocab: KeypointVocab):
        super().__init__()
        m = cfg.model
        self.cfg = cfg
        self.vocab = vocab
        self.input_size = cfg.data.input_size
        self.grid = (self.input_size // FEATURE_STRIDE,) * 2
        k = vocab.num_keypoints
        self.text_encoder = build_text_encoder(vocab, m.token_dim, m.embed_dim, seed=m.text_encoder_seed)
        self.prompts = build_prompt_set(vocab, m.n_attributes, m.template_length, m.prompt_seed,
                                        token_dim=m.token_dim, gkp=m.gkp)
        self.text_decoder = TextDecoder(m.embed_dim)
        self.visual_decoder = VisualTextDecoder(m.embed_dim)
        self.image_encoder = ImageEncoder(m.feat_dim)
        self.pixel_proj = PixelProjector(m.feat_dim, m.embed_dim)
        self.log_temperature = nn.Parameter(torch.tensor(math.log(m.temperature_init)))
        self.fusion = build_fusion(cfg.fusion.strategy, k, m.n_samples, self.grid, cfg.fusion.attention_layers)
        self.head = KeypointHead(m.feat_dim, k, m.head_width)

    @property
    def temperature(self) -> torch.Tensor:
        return self.log_temperature.exp()

    @property
    def pred_stride(self) -> float:
        return FEATURE_STRIDE / 4

    @property
    def sigma_px(self) -> float:
        return self.cfg.model.heatmap_sigma_cells * self.pred_stride

    def encoder_fingerprint(self) -> str:
        return self.text_encoder.fingerprint()

    def learnable_state(self) -> dict:
        return {k: v for k, v in self.state_dict().items() if not k.startswith("text_encoder.")}

    def forward(self, images: torch.Tensor, target: torch.Tensor | None = None,
                generator: torch.Generator | None = None, deterministic: bool = False) -> ModelOutput:
        """Run the full model.

        ``target`` (heatmaps at any resolution) drives heuristic selection in
        training; without it the heuristic strategy averages. ``deterministic``
        uses ``eps = 0`` so every sample equals the mean.
        """
        feat = self.image_encoder(images)
        pix = self.pixel_proj(feat)
        full, agnostic = self.prompts.encode(self.text_encoder)
        mu = self.text_decoder(full)
        sigma = self.visual_decoder(full, pix)
        dist = PromptDistribution(mu, sigma)
        n_s = self.cfg.model.n_samples
        noise = None
        if deterministic:
            noise = torch.zeros(sigma.shape[0], n_s, *sigma.shape[1:], dtype=sigma.dtype, device=sigma.device)
        z = sample_prompts(dist, n_s, generator=generator, noise=noise).z
        stack = score_maps(z, pix, self.temperature, self.grid)
        if self.fusion is None:
            score = fuse_heuristic(stack, target)
        else:
            score = self.fusion(stack)
        heatmaps = self.head(feat, score)
        return ModelOutput(feat, pix, full, agnostic, mu, sigma, stack, score, heatmaps)

    def losses(self, out: ModelOutput, keypoints: torch.Tensor, spatial_target: HeatmapTarget,
               pred_target: HeatmapTarget) -> LossBreakdown:
        lc = self.cfg.loss
        l_pred = pred_loss(out.heatmaps, pred_target)
        l_spatial = spatial_loss(out.score, spatial_target)
        e_prompt = out.mu.mean(dim=1)
        terms = [feature_loss(out.pix[b], e_prompt, keypoints[b], self.temperature, self.grid, FEATURE_STRIDE)
                 for b in range(keypoints.shape[0]) if (keypoints[b, :, 2] > 0).any()]
        l_feature = torch.stack(terms).mean() if terms else out.heatmaps.new_zeros(())
        l_prompt = prompt_loss(out.agnostic, PromptDistribution(out.mu, out.sigma), lc.use_div, lc.use_kl)
        return total_loss(l_pred, l_spatial, l_feature, l_prompt, lc.gamma, lc.beta)
