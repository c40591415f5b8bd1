"""Reduced float64 model stacks shared by the gradient checks."""

import dataclasses

import torch
import torch.nn.functional as F

from mmdt.classifier import MMDTClassifier, ModalityBundle, desk_backbone
from mmdt.objectives import LossWeights, discriminator_loss, total_loss
from mmdt.trainer import TrainConfig, create_state, generator_terms

SMALL = TrainConfig(learning_rate=1e-3, batch_size=2, total_iterations=4, side=32,
                    disentangler_widths=(4, 6, 8, 12), synthesizer_width=0.125, discriminator_width=0.125,
                    checkpoint_every=1000, log_every=2)

MICRO = desk_backbone(token_dim=24, depth=2, heads=2, ama_hidden=8, image_side=32, patch_side=8)


def rand_pair(seed=0, n=1, side=32, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return (torch.rand(n, 3, side, side, generator=g, dtype=dtype),
            torch.rand(n, 3, side, side, generator=g, dtype=dtype))


def total_loss_stack(side=16, seed=0):
    """Closure computing L through disentangler, synthesizer and both banks, and their parameters."""
    state = create_state(dataclasses.replace(SMALL, seed=seed, side=side), epoch_size=10)
    mods = (state.disentangler, state.synthesizer, state.disc_genuine, state.disc_recaptured, state.frozen)
    for m in mods:
        m.double()
    state.disentangler.train()
    state.synthesizer.train()
    i_g, i_r = rand_pair(seed, n=2, side=side, dtype=torch.float64)
    w = LossWeights()

    def loss():
        t = generator_terms(state, i_g, i_r, w)
        l_d = discriminator_loss(state.disc_genuine(i_g), state.disc_genuine(t.hat_g),
                                 state.disc_recaptured(i_r), state.disc_recaptured(t.hat_r))
        return total_loss(t.l_r, t.l_g, l_d, t.l_p, w)

    return loss, [p for m in mods[:4] for p in m.parameters()]


def adapter_head_stack(seed=2):
    """Cross-entropy closure through AMA adapters (non-zero up-projection) and head, and their parameters."""
    torch.manual_seed(seed)
    model = MMDTClassifier(MICRO).double()
    for ama in model.adapters:
        torch.nn.init.normal_(ama.up.weight, std=0.1)
        torch.nn.init.normal_(ama.up.bias, std=0.1)
    g = torch.Generator().manual_seed(seed)
    rgb = torch.rand(3, 3, 32, 32, generator=g, dtype=torch.float64)
    c = torch.rand(3, 3, 8, 8, generator=g, dtype=torch.float64) * 2 - 1
    t = torch.rand(3, 3, 32, 32, generator=g, dtype=torch.float64) * 2 - 1
    bundle = ModalityBundle.from_traces(rgb, c, t)
    y = torch.tensor([0, 1, 1])
    return (lambda: F.cross_entropy(model(bundle), y)), [p for p in model.parameters() if p.requires_grad]
