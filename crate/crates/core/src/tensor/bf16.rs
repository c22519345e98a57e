/// Rounds an f32 to the nearest bf16-representable value, ties to even.
///
/// The result is still an f32; its low 16 bits are zero.
pub fn round_bf16(x: f32) -> f32 {
    if x.is_nan() {
        return x;
    }
    let bits = x.to_bits();
    let lsb = (bits >> 16) & 1;
    let rounded = bits.wrapping_add(0x7FFF + lsb) & 0xFFFF_0000;
    f32::from_bits(rounded)
}

pub fn is_bf16(x: f32) -> bool {
    x.to_bits() & 0xFFFF == 0
}
