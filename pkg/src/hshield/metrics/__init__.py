from .distances import distances, linf, psnr, ssim, ms_ssim
from .proxy import ProxyEncoder, train_proxy_encoder, proxy_sim, save_proxy, load_proxy
from .pca import pca_alignment, principal_components
from .attn_stats import attention_entropy
from .thurstone import Judgement, thurstone_case_v
from .report import MetricsReport, MetricsRow

__all__ = [
    "distances", "linf", "psnr", "ssim", "ms_ssim",
    "ProxyEncoder", "train_proxy_encoder", "proxy_sim", "save_proxy", "load_proxy",
    "pca_alignment", "principal_components",
    "attention_entropy",
    "Judgement", "thurstone_case_v",
    "MetricsReport", "MetricsRow",
]
