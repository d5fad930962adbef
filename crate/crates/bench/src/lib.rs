//! Benchmarks for the convolution kernel, the network forward pass and the
//! scene renderer live in `benches/`.
