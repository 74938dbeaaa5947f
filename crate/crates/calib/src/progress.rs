use std::time::Instant;

use lsv_core::calibrate::{CheckPoint, Monitor, SliceReport};

/// Wall clock for calibration reports, optionally logging check points to
/// stderr.
pub struct Clock {
    start: Instant,
    label: String,
    verbose: bool,
}

impl Clock {
    pub fn new(label: impl Into<String>, verbose: bool) -> Self {
        Clock { start: Instant::now(), label: label.into(), verbose }
    }
}

impl Monitor for Clock {
    fn elapsed_secs(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }

    fn on_check(&mut self, slice: usize, c: &CheckPoint) {
        if self.verbose {
            eprintln!(
                "[{} {:8.1}s] slice {slice} step {:5} paths {:6} loss {:.3e} max err {:.4} mean err {:.4}",
                self.label,
                self.elapsed_secs(),
                c.step,
                c.n_paths,
                c.loss,
                c.max_error,
                c.mean_error
            );
        }
    }

    fn on_slice(&mut self, r: &SliceReport) {
        if self.verbose {
            let state = if r.skipped { "skipped" } else if r.converged { "converged" } else { "step cap" };
            eprintln!(
                "[{} {:8.1}s] slice {} {state} after {} steps: max err {:.4} mean err {:.4}",
                self.label,
                self.elapsed_secs(),
                r.index,
                r.steps,
                r.max_error,
                r.mean_error
            );
        }
    }
}
