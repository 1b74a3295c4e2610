/// Fixed-size little-endian element types that can be read out of objects.
pub trait Element: Copy + Send + Sync + 'static {
    const SIZE: usize;

    fn from_le_slice(bytes: &[u8]) -> Self;

    fn write_le(self, out: &mut [u8]);

    /// # Safety
    /// `ptr` must be valid for reads of `SIZE` bytes.
    unsafe fn read_ptr(ptr: *const u8) -> Self {
        let mut buf = [0u8; 16];
        std::ptr::copy_nonoverlapping(ptr, buf.as_mut_ptr(), Self::SIZE);
        Self::from_le_slice(&buf[..Self::SIZE])
    }
}

macro_rules! impl_element {
    ($($t:ty),*) => {$(
        impl Element for $t {
            const SIZE: usize = std::mem::size_of::<$t>();

            fn from_le_slice(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("element width"))
            }

            fn write_le(self, out: &mut [u8]) {
                out.copy_from_slice(&self.to_le_bytes());
            }
        }
    )*};
}

impl_element!(u8, i8, u16, i16, u32, i32, u64, i64, f32, f64);
