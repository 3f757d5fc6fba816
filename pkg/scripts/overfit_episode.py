"""Overfit a single training episode (at a higher lr than episodic training) and report Dice loss and query mIoU.

    python scripts/overfit_episode.py [episode_seed] [steps]
"""

import json
import sys

from cyctr import numtensor as nt
from cyctr.config import from_dict
from cyctr.episodes import IoUAccumulator
from cyctr.model import dice_loss
from cyctr.train import split_of, train, train_episode


def run(episode_seed: int = 0, steps: int = 500, lr: float = 0.04) -> dict:
    cfg = from_dict({"data": {"overfit_episode": episode_seed}, "optim": {"lr": lr, "steps": steps, "log_every": 50}})
    result = train(cfg)
    ep = train_episode(cfg, 0, split_of(cfg))
    with nt.no_grad():
        out = result.model(ep.support_images, ep.support_masks, ep.query_image, 0)
    acc = IoUAccumulator()
    acc.add(out.prediction(), ep.query_mask, ep.class_id)
    return {
        "episode_seed": episode_seed,
        "steps": steps,
        "dice_loss": dice_loss(out.logits, ep.query_mask).item(),
        "query_miou": acc.miou(),
        "history": result.history,
    }


if __name__ == "__main__":
    seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
    steps = int(sys.argv[2]) if len(sys.argv) > 2 else 500
    print(json.dumps(run(seed, steps), indent=2))
