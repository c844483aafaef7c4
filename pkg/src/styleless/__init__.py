"""Style-robust segmentation on a small numpy autodiff: Gram statistics,
style-perturbation filters, the StyleLess layer and its two-stage training."""

from .tensor import Tape, Tensor, backward, gradcheck, no_grad
from .style import content_loss, gram, gram_loss, style_loss, style_transfer
from .filters import FilterConfig, gram_noise, gram_remove, gram_weighting, select_phi
from .layer import StyleLessLayer, insert_styleless, styleless_forward
from .model import ToySegNet, count_parameters, load_checkpoint, save_checkpoint

__all__ = [
    "Tape", "Tensor", "backward", "gradcheck", "no_grad",
    "content_loss", "gram", "gram_loss", "style_loss", "style_transfer",
    "FilterConfig", "gram_noise", "gram_remove", "gram_weighting", "select_phi",
    "StyleLessLayer", "insert_styleless", "styleless_forward",
    "ToySegNet", "count_parameters", "load_checkpoint", "save_checkpoint",
]
