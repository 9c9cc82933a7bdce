from .attention import BidirectionalFusion, SoftAttention, scaled_dot_attention
from .encoder import ConvEncoder, SwinEncoder, UNetDecoder
from .model import KIIM, Ensemble, KIIMOutput, ModelOutput, ensemble, forward_sample, sample_tensors
