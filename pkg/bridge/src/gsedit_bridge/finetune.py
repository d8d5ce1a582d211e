"""DreamBooth fine-tuning orchestration.

Delegates the actual training to the diffusers DreamBooth trainer; this
module owns dataset validation, argument assembly, and checkpoint layout
so that `serve` can load the result directly. The class prompt should be
the target editing prompt: the prior-preservation loss then pushes the
model to treat the edited subject as the default style for that class,
which also sharpens the keyword's cross-attention maps.
"""

from __future__ import annotations

import subprocess
import sys
from pathlib import Path

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".pfm"}


class FinetuneError(RuntimeError):
    pass


def validate_dataset(dataset_dir) -> list[Path]:
    dataset_dir = Path(dataset_dir)
    if not dataset_dir.is_dir():
        raise FinetuneError(f"dataset directory does not exist: {dataset_dir}")
    images = sorted(p for p in dataset_dir.iterdir()
                    if p.suffix.lower() in IMAGE_SUFFIXES)
    if not images:
        raise FinetuneError(
            f"no training images (png/jpg/pfm) in {dataset_dir}")
    return images


def dreambooth_finetune(dataset_dir, keyword: str, class_prompt: str,
                        output_dir, model_id: str =
                        "runwayml/stable-diffusion-v1-5",
                        steps: int = 800, learning_rate: float = 5e-6,
                        device: str = "cuda") -> Path:
    """Fine-tune the base model on rendered views of the subject.

    Returns the checkpoint directory, loadable by the serve backend.
    Raises FinetuneError with a clear message when the dataset or the
    training stack is missing.
    """
    images = validate_dataset(dataset_dir)
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)

    try:
        import diffusers  # noqa: F401
        import accelerate  # noqa: F401
    except ImportError as exc:
        raise FinetuneError(
            "DreamBooth training needs the [diffusion] extras "
            f"(diffusers, accelerate): {exc}") from exc

    trainer = _locate_trainer()
    cmd = [
        sys.executable, str(trainer),
        "--pretrained_model_name_or_path", model_id,
        "--instance_data_dir", str(Path(dataset_dir)),
        "--instance_prompt", f"a {keyword}",
        "--class_prompt", class_prompt,
        "--with_prior_preservation",
        "--output_dir", str(output_dir),
        "--max_train_steps", str(steps),
        "--learning_rate", str(learning_rate),
        "--train_batch_size", "1",
        "--resolution", "512",
    ]
    result = subprocess.run(cmd, capture_output=True, text=True)
    if result.returncode != 0:
        raise FinetuneError(
            f"trainer exited with {result.returncode}; last output:\n"
            + result.stderr[-2000:])
    if not (output_dir / "model_index.json").exists():
        raise FinetuneError(
            f"trainer finished but wrote no checkpoint at {output_dir}")
    return output_dir


def _locate_trainer() -> Path:
    """Find the diffusers DreamBooth training script."""
    import diffusers
    root = Path(diffusers.__file__).parent
    for candidate in (root.parent / "examples" / "dreambooth"
                      / "train_dreambooth.py",
                      root / "examples" / "dreambooth"
                      / "train_dreambooth.py"):
        if candidate.exists():
            return candidate
    raise FinetuneError(
        "could not locate diffusers' train_dreambooth.py; install diffusers "
        "from source or set up the examples directory")
