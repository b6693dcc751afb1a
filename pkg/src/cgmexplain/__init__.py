"""Counterfactual explanations of image classifiers with causal generative models."""
from .data import AttributeVector, Observation, load_dataset, fit_normalizer, normalize, denormalize
from .scm import AttributeSCM, CausalGraph, fit_mechanisms, abduct, counterfactual_attributes, sample_attributes
from .cgm import CGMHandle, train_vae, train_bigan, encode, generate, counterfactual_image, expected_embedding, interpolated_embedding
from .classifiers import ClassifierHandle, train_classifier, train_oracles, train_autoencoders, predict_class
from .pixel import shapley_saliency, pertinent_negative, pertinent_positive, sweep_explain, SweepConfig
from .attributes import MCConfig, mc_attribute_classifier, attribute_shapley, local_importance, global_importance
from .counterfactuals import CFExplanation, gradient_cf, agnostic_cf, baseline_pixel_cf
from .metrics import im1, im2, oracle_score, mean_ci, morphometrics

__version__ = "0.1.0"
