//! Per-tensor power-of-two int8 quantization: calibration, fake
//! quantization, conversion to an int8 model and the integer executor.

pub mod calibrate;
pub mod fake;
pub mod int8;

pub use calibrate::{calibrate, exponent_for};
pub use fake::{fake_quant, QuantTable};
pub use int8::{
    forward_int8, forward_int8_trace, load_quantized, quantize_graph, requantize, save_quantized, Int8Trace,
    QuantLayer, QuantizedModel,
};
