/// Per-region bitmap of installed pages.
#[derive(Debug, Clone)]
pub(crate) struct PageMap {
    bits: Vec<u64>,
    page_size: usize,
    installed: usize,
}

impl PageMap {
    pub(crate) fn new(length: usize, page_size: usize) -> Self {
        let pages = length / page_size;
        PageMap {
            bits: vec![0; pages.div_ceil(64)],
            page_size,
            installed: 0,
        }
    }

    pub(crate) fn get(&self, page: usize) -> bool {
        self.bits[page / 64] & (1 << (page % 64)) != 0
    }

    fn set(&mut self, page: usize, on: bool) -> bool {
        let was = self.get(page);
        if on {
            self.bits[page / 64] |= 1 << (page % 64);
        } else {
            self.bits[page / 64] &= !(1 << (page % 64));
        }
        match (was, on) {
            (false, true) => self.installed += 1,
            (true, false) => self.installed -= 1,
            _ => {}
        }
        was != on
    }

    pub(crate) fn is_installed(&self, byte: usize) -> bool {
        self.get(byte / self.page_size)
    }

    /// Maximal runs of pages in `[byte_lo, byte_lo+len)` whose state differs
    /// from `installed`, as byte ranges.
    pub(crate) fn runs(&self, byte_lo: usize, len: usize, installed: bool) -> Vec<(usize, usize)> {
        let p = self.page_size;
        let mut out: Vec<(usize, usize)> = Vec::new();
        for page in byte_lo / p..(byte_lo + len) / p {
            if self.get(page) != installed {
                match out.last_mut() {
                    Some((lo, l)) if *lo + *l == page * p => *l += p,
                    _ => out.push((page * p, p)),
                }
            }
        }
        out
    }

    pub(crate) fn all_installed(&self, byte_lo: usize, len: usize) -> bool {
        self.runs(byte_lo, len, true).is_empty()
    }

    /// Mark pages, returning how many changed state.
    pub(crate) fn mark(&mut self, byte_lo: usize, len: usize, installed: bool) -> usize {
        let p = self.page_size;
        (byte_lo / p..(byte_lo + len) / p)
            .filter(|&page| self.set(page, installed))
            .count()
    }

    pub(crate) fn installed_bytes(&self) -> usize {
        self.installed * self.page_size
    }
}
