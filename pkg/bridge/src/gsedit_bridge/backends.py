"""Guidance and segmentation backends served over the wire.

EchoBackend answers without any model: residual equals the request image
and point-prompted masks come back as a uniform 0.5 grid; clients use it
for transport testing. DiffusionBackend wraps a DreamBooth-fine-tuned
latent diffusion model: it adds noise at the requested timestep, runs
the denoiser, returns the pixel-space noise residual, and exports the
keyword's cross-attention map. All neural concerns (latents, VAE decode,
attention resizing) stay on this side of the protocol; clients only ever
see pixel-space grids.
"""

from __future__ import annotations

import numpy as np


def normalize_attention(raw: np.ndarray) -> np.ndarray:
    """Scale an attention grid into [0, 1]; an all-equal grid becomes 0."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size == 0:
        return np.zeros_like(raw)
    lo, hi = float(raw.min()), float(raw.max())
    if hi - lo <= 0.0:
        return np.zeros_like(raw)
    return (raw - lo) / (hi - lo)


class EchoBackend:
    """Transport-test backend: deterministic, model-free."""

    def guidance(self, image, prompt, timestep, seed):
        return image, None

    def segment(self, width, height, view_id, keyword, positives, negatives,
                image):
        return np.full((height, width), 0.5)


class GaussianPointBackend:
    """Model-free promptable segmenter for desk-scale integration tests.

    Produces a soft mask as a sum of isotropic bumps at the positive
    prompts minus bumps at the negatives, normalized to [0, 1]. Stands in
    for a real promptable segmenter when none is configured.
    """

    def __init__(self, sigma_fraction: float = 0.08):
        self.sigma_fraction = sigma_fraction

    def __call__(self, width, height, positives, negatives):
        sigma = max(1.0, self.sigma_fraction * max(width, height))
        ys = np.arange(height)[:, None] + 0.5
        xs = np.arange(width)[None, :] + 0.5
        mask = np.zeros((height, width))
        for x, y in positives:
            mask += np.exp(-((xs - x) ** 2 + (ys - y) ** 2) / (2 * sigma**2))
        for x, y in negatives:
            mask -= np.exp(-((xs - x) ** 2 + (ys - y) ** 2) / (2 * sigma**2))
        return normalize_attention(np.maximum(mask, 0.0))


class DiffusionBackend:
    """Stable-Diffusion-backed guidance; requires the diffusion extras.

    The checkpoint is expected to be a DreamBooth fine-tune whose rare
    token binds the edited subject. Attention maps are collected from the
    mid-block cross-attention layers, averaged over denoising steps, and
    resized to the view resolution; the residual is decoded to pixel
    space so the client never touches latents.
    """

    def __init__(self, model_id: str, checkpoint: str | None = None,
                 device: str = "cpu",
                 keyword_tokens: dict[str, str] | None = None):
        try:
            import torch  # noqa: F401
            from diffusers import StableDiffusionImg2ImgPipeline  # noqa: F401
        except ImportError as exc:
            raise RuntimeError(
                "DiffusionBackend needs the [diffusion] extras "
                "(torch, diffusers, transformers, accelerate); install them "
                f"or run with --echo. Import failed: {exc}") from exc
        import torch
        from diffusers import StableDiffusionImg2ImgPipeline

        self.torch = torch
        self.device = device
        self.keyword_tokens = keyword_tokens or {}
        source = checkpoint or model_id
        self.pipe = StableDiffusionImg2ImgPipeline.from_pretrained(source)
        self.pipe.to(device)
        self.pipe.safety_checker = None
        self.point_segmenter = GaussianPointBackend()

    def guidance(self, image, prompt, timestep, seed):
        torch = self.torch
        pipe = self.pipe
        height, width = image.shape[0], image.shape[1]
        generator = torch.Generator(device=self.device).manual_seed(seed)
        keyword = self._keyword_for(prompt)
        captured: list = []
        hooks = self._install_attention_hooks(captured) if keyword else []
        try:
            with torch.no_grad():
                pixels = torch.from_numpy(
                    np.ascontiguousarray(image, dtype=np.float32)
                ).permute(2, 0, 1)[None].to(self.device)
                pixels = pixels * 2.0 - 1.0
                latents = pipe.vae.encode(pixels).latent_dist.sample(generator)
                latents = latents * pipe.vae.config.scaling_factor
                noise = torch.randn(latents.shape, generator=generator,
                                    device=self.device, dtype=latents.dtype)
                t = torch.tensor([int(timestep)], device=self.device)
                noisy = pipe.scheduler.add_noise(latents, noise, t)
                embeds = pipe.encode_prompt(prompt, self.device, 1, False)[0]
                predicted = pipe.unet(noisy, t,
                                      encoder_hidden_states=embeds).sample
                residual_latent = predicted - noise
                decoded = pipe.vae.decode(
                    residual_latent / pipe.vae.config.scaling_factor).sample
                residual = decoded[0].permute(1, 2, 0).cpu().numpy() * 0.5
        finally:
            for hook in hooks:
                hook.remove()
        attention = None
        if keyword and captured:
            attention = self._attention_for_token(captured, prompt, keyword,
                                                  height, width)
        return residual.astype(np.float64), attention

    def _keyword_for(self, prompt: str) -> str | None:
        for keyword, token in self.keyword_tokens.items():
            if token in prompt or keyword in prompt:
                return token if token in prompt else keyword
        return None

    def _install_attention_hooks(self, captured: list):
        """Capture attention probabilities from mid-block cross-attention."""
        hooks = []
        for name, module in self.pipe.unet.named_modules():
            if "mid_block" in name and name.endswith("attn2"):
                def grab(_module, _inputs, output, bucket=captured):
                    probs = getattr(_module.processor, "attn_probs", None)
                    if probs is not None:
                        bucket.append(probs.detach().cpu())
                hooks.append(module.register_forward_hook(grab))
        return hooks

    def _attention_for_token(self, captured, prompt, keyword, height, width):
        torch = self.torch
        tokens = self.pipe.tokenizer(prompt).input_ids
        keyword_ids = self.pipe.tokenizer(keyword,
                                          add_special_tokens=False).input_ids
        try:
            index = next(i for i in range(len(tokens))
                         if tokens[i:i + len(keyword_ids)] == keyword_ids)
        except StopIteration:
            return None
        maps = []
        for probs in captured:
            # (heads, query, key) -> keyword column averaged over heads
            sel = probs[..., index:index + len(keyword_ids)].mean(dim=-1)
            side = int(round(float(sel.shape[-1]) ** 0.5))
            maps.append(sel.mean(dim=0).reshape(side, side))
        grid = torch.stack([m for m in maps]).mean(dim=0)[None, None]
        resized = torch.nn.functional.interpolate(
            grid, size=(height, width), mode="bilinear", align_corners=False)
        return normalize_attention(resized[0, 0].numpy())

    def segment(self, width, height, view_id, keyword, positives, negatives,
                image):
        return self.point_segmenter(width, height, positives, negatives)
