"""qpdn: simulation, reconstruction and neural denoising of control-phase process matrices."""

from .quantum import (
    PAULI_2Q,
    PHI_GRID,
    ProcessMatrix,
    apply_channel,
    born_probability,
    cp_unitary,
    ideal_chi,
    process_fidelity,
    psd_project,
)
from .tomography import (
    CountTable,
    Dataset,
    StateBasis,
    beta_tensor,
    chi_from_lambda,
    chi_least_squares,
    expected_counts,
    generate_dataset,
    lambda_from_counts,
    normalize,
    rescale_components,
    sample_counts,
)
from .mle import MleConfig, MleReport, mle_fit

__version__ = "0.1.0"

__all__ = [
    "PAULI_2Q",
    "PHI_GRID",
    "ProcessMatrix",
    "apply_channel",
    "born_probability",
    "cp_unitary",
    "ideal_chi",
    "process_fidelity",
    "psd_project",
    "CountTable",
    "Dataset",
    "StateBasis",
    "beta_tensor",
    "chi_from_lambda",
    "chi_least_squares",
    "expected_counts",
    "generate_dataset",
    "lambda_from_counts",
    "normalize",
    "rescale_components",
    "sample_counts",
    "MleConfig",
    "MleReport",
    "mle_fit",
    "__version__",
]
