//! Conditional denoising-diffusion normative models for tabular phenotypes.

pub mod dataset;
pub mod denoisers;
pub mod diffusion;
pub mod eval;
pub mod ndmath;
pub mod pipeline;
pub mod synthgen;

// Tensor-sized buffers are allocated and freed at a high rate; the system
// allocator returns them to the OS and pays a page fault on every reuse.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;
