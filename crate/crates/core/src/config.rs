use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;

use crate::backend::BackendChoice;
use crate::error::{Result, UfoError};
use crate::layout::DEFAULT_CHUNK_SIZE;
use crate::populate::Populate;
use crate::store::WaterMarks;

/// Everything needed to create one object.
#[derive(Clone)]
pub struct UfoConfig {
    pub header_size: usize,
    pub element_size: usize,
    pub element_count: usize,
    /// `None` uses the core's default chunk size.
    pub chunk_size: Option<usize>,
    /// Skip hashing and write-back; writes are lost on eviction.
    pub read_only: bool,
    pub populate: Arc<dyn Populate>,
}

impl UfoConfig {
    pub fn new(element_size: usize, element_count: usize, populate: Arc<dyn Populate>) -> Self {
        UfoConfig {
            header_size: 0,
            element_size,
            element_count,
            chunk_size: None,
            read_only: false,
            populate,
        }
    }

    pub fn with_header(mut self, header_size: usize) -> Self {
        self.header_size = header_size;
        self
    }

    pub fn with_chunk_size(mut self, chunk_size: usize) -> Self {
        self.chunk_size = Some(chunk_size);
        self
    }

    pub fn read_only(mut self, read_only: bool) -> Self {
        self.read_only = read_only;
        self
    }
}

impl fmt::Debug for UfoConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("UfoConfig")
            .field("header_size", &self.header_size)
            .field("element_size", &self.element_size)
            .field("element_count", &self.element_count)
            .field("chunk_size", &self.chunk_size)
            .field("read_only", &self.read_only)
            .finish_non_exhaustive()
    }
}

pub const ENV_HIGH_WATER: &str = "UFO_HIGH_WATER";
pub const ENV_LOW_WATER: &str = "UFO_LOW_WATER";
pub const ENV_CHUNK_SIZE: &str = "UFO_CHUNK_SIZE";
pub const ENV_BACKEND: &str = "UFO_BACKEND";
pub const ENV_TMPDIR: &str = "UFO_TMPDIR";
/// Log filter read by binaries that initialise logging.
pub const ENV_LOG: &str = "UFO_LOG";

/// Core parameters. Unset fields fall back to the `UFO_*` environment
/// variables and then to built-in defaults.
#[derive(Debug, Clone, Default)]
pub struct CoreParams {
    pub high_water: Option<usize>,
    pub low_water: Option<usize>,
    pub chunk_size: Option<usize>,
    pub backend: Option<BackendChoice>,
    pub temp_dir: Option<PathBuf>,
    /// Abort the process when a population function fails instead of
    /// poisoning the object.
    pub abort_on_populate_failure: bool,
}

#[derive(Debug, Clone)]
pub(crate) struct ResolvedParams {
    pub marks: WaterMarks,
    pub chunk_size: usize,
    pub backend: BackendChoice,
    pub temp_dir: PathBuf,
    pub abort_on_populate_failure: bool,
}

impl CoreParams {
    pub fn with_marks(mut self, high: usize, low: usize) -> Self {
        self.high_water = Some(high);
        self.low_water = Some(low);
        self
    }

    pub fn with_chunk_size(mut self, chunk_size: usize) -> Self {
        self.chunk_size = Some(chunk_size);
        self
    }

    pub fn with_backend(mut self, backend: BackendChoice) -> Self {
        self.backend = Some(backend);
        self
    }

    pub fn with_temp_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.temp_dir = Some(dir.into());
        self
    }

    pub(crate) fn resolve(&self, page_size: usize) -> Result<ResolvedParams> {
        self.resolve_with(page_size, |k| std::env::var(k).ok())
    }

    pub(crate) fn resolve_with(
        &self,
        page_size: usize,
        env: impl Fn(&str) -> Option<String>,
    ) -> Result<ResolvedParams> {
        let size_from_env = |key: &str| -> Result<Option<usize>> {
            env(key)
                .map(|v| parse_size(&v).map_err(|e| UfoError::InvalidConfig(format!("{key}: {e}"))))
                .transpose()
        };
        let high = match self.high_water {
            Some(v) => v,
            None => size_from_env(ENV_HIGH_WATER)?.unwrap_or(WaterMarks::DEFAULT_HIGH),
        };
        let low = match self.low_water {
            Some(v) => v,
            None => size_from_env(ENV_LOW_WATER)?.unwrap_or(WaterMarks::DEFAULT_LOW),
        };
        let marks = WaterMarks::new(high, low)?;
        let chunk_size = match self.chunk_size {
            Some(v) => v,
            None => size_from_env(ENV_CHUNK_SIZE)?.unwrap_or(DEFAULT_CHUNK_SIZE),
        };
        if chunk_size == 0 || chunk_size % page_size != 0 {
            return Err(UfoError::InvalidConfig(format!(
                "chunk size {chunk_size} is not a positive multiple of the page size {page_size}"
            )));
        }
        let backend = match self.backend {
            Some(b) => b,
            None => env(ENV_BACKEND)
                .map(|v| v.parse().map_err(UfoError::InvalidConfig))
                .transpose()?
                .unwrap_or_default(),
        };
        let temp_dir = self
            .temp_dir
            .clone()
            .or_else(|| env(ENV_TMPDIR).map(PathBuf::from))
            .unwrap_or_else(std::env::temp_dir);
        if !temp_dir.is_dir() {
            return Err(UfoError::InvalidConfig(format!(
                "cache directory {} does not exist",
                temp_dir.display()
            )));
        }
        Ok(ResolvedParams {
            marks,
            chunk_size,
            backend,
            temp_dir,
            abort_on_populate_failure: self.abort_on_populate_failure,
        })
    }
}

/// Parse a byte count such as `4096`, `64K`, `32MiB` or `1g`.
pub fn parse_size(text: &str) -> std::result::Result<usize, String> {
    let t = text.trim();
    let split = t.find(|c: char| !c.is_ascii_digit()).unwrap_or(t.len());
    let (digits, suffix) = t.split_at(split);
    let base: usize = digits
        .parse()
        .map_err(|_| format!("{text:?} is not a byte count"))?;
    let shift = match suffix.trim().to_ascii_lowercase().as_str() {
        "" | "b" => 0,
        "k" | "kb" | "kib" => 10,
        "m" | "mb" | "mib" => 20,
        "g" | "gb" | "gib" => 30,
        "t" | "tb" | "tib" => 40,
        other => return Err(format!("unknown size suffix {other:?}")),
    };
    base.checked_mul(1usize << shift)
        .ok_or_else(|| format!("{text:?} overflows"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn sizes() {
        assert_eq!(parse_size("4096").unwrap(), 4096);
        assert_eq!(parse_size("32M").unwrap(), 32 << 20);
        assert_eq!(parse_size("1GiB").unwrap(), 1 << 30);
        assert_eq!(parse_size(" 2k ").unwrap(), 2048);
        assert!(parse_size("12Q").is_err());
        assert!(parse_size("lots").is_err());
    }

    #[test]
    fn explicit_params_beat_environment() {
        let env: HashMap<&str, &str> = [
            (ENV_HIGH_WATER, "64M"),
            (ENV_LOW_WATER, "32M"),
            (ENV_CHUNK_SIZE, "8K"),
            (ENV_BACKEND, "trap"),
        ]
        .into();
        let lookup = |k: &str| env.get(k).map(|v| v.to_string());
        let r = CoreParams::default().resolve_with(4096, lookup).unwrap();
        assert_eq!(r.marks.high(), 64 << 20);
        assert_eq!(r.chunk_size, 8192);
        assert_eq!(r.backend, BackendChoice::Trap);

        let r = CoreParams::default()
            .with_marks(10 << 20, 5 << 20)
            .with_backend(BackendChoice::Userfault)
            .resolve_with(4096, lookup)
            .unwrap();
        assert_eq!(r.marks.low(), 5 << 20);
        assert_eq!(r.backend, BackendChoice::Userfault);
    }

    #[test]
    fn defaults_and_validation() {
        let r = CoreParams::default().resolve_with(4096, |_| None).unwrap();
        assert_eq!(r.marks, WaterMarks::default());
        assert_eq!(r.chunk_size, DEFAULT_CHUNK_SIZE);
        assert_eq!(r.backend, BackendChoice::Auto);
        assert!(CoreParams::default()
            .with_marks(1, 2)
            .resolve_with(4096, |_| None)
            .is_err());
        assert!(CoreParams::default()
            .with_chunk_size(5000)
            .resolve_with(4096, |_| None)
            .is_err());
        assert!(CoreParams::default()
            .with_temp_dir("/definitely/not/here")
            .resolve_with(4096, |_| None)
            .is_err());
    }
}
