//! Wall-clock timing that degrades to zero where no monotonic clock exists.

#[cfg(not(target_arch = "wasm32"))]
pub struct Stopwatch(std::time::Instant);

#[cfg(not(target_arch = "wasm32"))]
impl Stopwatch {
    pub fn start() -> Self {
        Stopwatch(std::time::Instant::now())
    }

    pub fn elapsed_secs(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

// wasm32-unknown-unknown panics on Instant::now()
#[cfg(target_arch = "wasm32")]
pub struct Stopwatch;

#[cfg(target_arch = "wasm32")]
impl Stopwatch {
    pub fn start() -> Self {
        Stopwatch
    }

    pub fn elapsed_secs(&self) -> f64 {
        0.0
    }
}
