//! Functional execution, reference oracle and performance model.

pub mod exec;
pub mod oracle;
pub mod perf;
pub mod tensor;

pub use exec::{check_arch, exec_flow, requantized_dot, run_flow, MachineState};
pub use oracle::reference_oracle;
pub use perf::{perf_model, SimReport};
pub use tensor::{load_tensors, parse_tensors, random_tensors, tensors_to_json, Tensor, TensorMap};
