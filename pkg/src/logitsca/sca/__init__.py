from .attack import (ProfiledScorer, kind_of, map_accumulate, paired_noninferiority_pvalue,
                     rank_hits, success_rate_curve)
from .neural import NeuralDistinguisher, NeuralHyper, neural_log_scores, train_distinguisher
from .snr import (EmptyPoiError, PoiSelection, SnrProfile, compute_snr, relative_threshold,
                  select_poi)
from .templates import TemplateModel, fit_templates, template_log_scores

__all__ = [
    "EmptyPoiError", "NeuralDistinguisher", "NeuralHyper", "PoiSelection", "ProfiledScorer",
    "SnrProfile", "TemplateModel", "compute_snr", "fit_templates", "kind_of", "map_accumulate",
    "neural_log_scores", "paired_noninferiority_pvalue", "rank_hits", "relative_threshold",
    "select_poi", "success_rate_curve", "template_log_scores", "train_distinguisher",
]
