"""endoscrub: out-of-body frame detection and scrubbing for endoscopic video.

Pipeline: synthetic or ingested corpus -> seeded fold splits -> rotation
pretext pretraining -> label-efficient fine-tuning -> imbalance-aware
evaluation -> privacy scrubbing via edit lists.
"""

__version__ = "0.1.0"
