use std::sync::Arc;

use super::{Populate, PopulateError, PopulateRequest};
use crate::UfoConfig;

/// Every element holds the same bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FillSpec {
    pub value: Vec<u8>,
    pub element_count: usize,
}

impl FillSpec {
    pub fn new(value: impl Into<Vec<u8>>, element_count: usize) -> Self {
        let value = value.into();
        assert!(!value.is_empty(), "fill value must be at least one byte");
        FillSpec {
            value,
            element_count,
        }
    }

    pub fn config(&self) -> UfoConfig {
        UfoConfig::new(
            self.value.len(),
            self.element_count,
            Arc::new(FillPopulate {
                value: self.value.clone(),
            }),
        )
    }
}

#[derive(Debug, Clone)]
pub struct FillPopulate {
    pub value: Vec<u8>,
}

impl Populate for FillPopulate {
    fn populate(&self, request: &mut PopulateRequest<'_>) -> Result<(), PopulateError> {
        if self.value.len() != request.element_size {
            return Err(PopulateError::Other(format!(
                "fill value is {} bytes, elements are {}",
                self.value.len(),
                request.element_size
            )));
        }
        if self.value.iter().all(|&b| b == self.value[0]) {
            request.target.fill(self.value[0]);
        } else {
            for (_, out) in request.elements() {
                out.copy_from_slice(&self.value);
            }
        }
        Ok(())
    }
}
