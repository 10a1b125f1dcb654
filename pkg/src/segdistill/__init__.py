"""Teacher-student distillation for semantic segmentation.

Core building blocks: value types and temperature-scaled softmax
(:mod:`segdistill.datamodel`), the loss terms (:mod:`segdistill.losses`,
:mod:`segdistill.adversary`), the model registry
(:mod:`segdistill.models`), data handling (:mod:`segdistill.data`),
training (:mod:`segdistill.trainer`), evaluation metrics
(:mod:`segdistill.metrics`), the entropy study
(:mod:`segdistill.analysis`) and the sweep harness
(:mod:`segdistill.sweep`). A FastAPI service
(:mod:`segdistill.service`) wraps everything for job submission; the
CLI (:mod:`segdistill.cli`) is a thin client of that service.
"""

__version__ = "0.1.0"
