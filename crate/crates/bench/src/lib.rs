//! Shared fixtures for the benchmarks.

use disarm_core::phantom::{apply_scanner_effect, generate_phantom, PhantomSpec, ScannerEffect};
use disarm_core::Volume;

/// Subject `subject` imaged under each of the default scanners.
pub fn cohort(subject: usize, shape: [usize; 3]) -> Vec<Volume> {
    let spec = PhantomSpec {
        shape,
        ..PhantomSpec::default()
    };
    let p = generate_phantom(&spec.for_subject(subject)).expect("phantom");
    ScannerEffect::desk_defaults()
        .iter()
        .map(|e| apply_scanner_effect(&p, &e.for_subject(subject)).expect("scanner effect"))
        .collect()
}
