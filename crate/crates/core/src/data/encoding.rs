use super::DataError;

/// Marks a pixel on a class boundary; not part of class identity.
pub const BOUNDARY_BIT: u32 = 0x80_0000;

const CLASS_MASK: u32 = 0xFF;

/// Mapping between ground-truth flag combinations (low byte of the pixel)
/// and dense class indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassEncoding {
    names: Vec<String>,
    flags: Vec<u8>,
    lookup: [Option<u8>; 256],
}

impl ClassEncoding {
    /// Build from `(name, flags)` pairs; the index is the list position.
    pub fn new(classes: &[(&str, u8)]) -> Result<Self, DataError> {
        if classes.len() < 2 || classes.len() > 256 {
            return Err(DataError::Invalid(format!("encoding needs 2..=256 classes, got {}", classes.len())));
        }
        let mut lookup = [None; 256];
        for (i, (name, f)) in classes.iter().enumerate() {
            if lookup[*f as usize].is_some() {
                return Err(DataError::Invalid(format!("flags 0x{f:02X} of `{name}` used twice")));
            }
            lookup[*f as usize] = Some(i as u8);
        }
        Ok(ClassEncoding {
            names: classes.iter().map(|(n, _)| n.to_string()).collect(),
            flags: classes.iter().map(|(_, f)| *f).collect(),
            lookup,
        })
    }

    /// Background 0x1, comment 0x2, decoration 0x4, main text 0x8; the
    /// eight legal combinations ordered by flag value.
    pub fn hisdb() -> Self {
        Self::new(&[
            ("background", 0x1),
            ("comment", 0x2),
            ("decoration", 0x4),
            ("comment+decoration", 0x6),
            ("main text", 0x8),
            ("main text+comment", 0xA),
            ("main text+decoration", 0xC),
            ("main text+comment+decoration", 0xE),
        ])
        .expect("static table is valid")
    }

    pub fn num_classes(&self) -> usize {
        self.flags.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn flags(&self, index: u8) -> Option<u8> {
        self.flags.get(index as usize).copied()
    }

    /// Class index of a 24-bit `0xRRGGBB` pixel.
    pub fn decode(&self, rgb: u32) -> Result<u8, DataError> {
        if rgb & !(CLASS_MASK | BOUNDARY_BIT) != 0 {
            return Err(DataError::IllegalValue(rgb));
        }
        self.lookup[(rgb & CLASS_MASK) as usize].ok_or(DataError::IllegalValue(rgb))
    }

    pub fn encode(&self, index: u8, boundary: bool) -> Result<u32, DataError> {
        let f = self.flags(index).ok_or_else(|| DataError::Invalid(format!("class index {index} out of range")))?;
        Ok(f as u32 | if boundary { BOUNDARY_BIT } else { 0 })
    }
}

impl Default for ClassEncoding {
    fn default() -> Self {
        Self::hisdb()
    }
}

/// Decode with the default table.
pub fn decode_gt_pixel(rgb: u32) -> Result<u8, DataError> {
    thread_local! {
        static TABLE: ClassEncoding = ClassEncoding::hisdb();
    }
    TABLE.with(|t| t.decode(rgb))
}

pub fn is_boundary(rgb: u32) -> bool {
    rgb & BOUNDARY_BIT != 0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documented_examples() {
        let e = ClassEncoding::hisdb();
        assert_eq!(decode_gt_pixel(0x000001).unwrap(), 0);
        let mc = decode_gt_pixel(0x00000A).unwrap();
        assert_eq!(e.names()[mc as usize], "main text+comment");
        assert_eq!(decode_gt_pixel(0x80000A).unwrap(), mc);
        assert!(decode_gt_pixel(0x000003).is_err());
        assert!(decode_gt_pixel(0x000009).is_err());
        assert!(decode_gt_pixel(0x000000).is_err());
        assert!(decode_gt_pixel(0x000108).is_err());
    }

    #[test]
    fn exactly_sixteen_legal_values() {
        let legal: Vec<u32> = (0..=0xFF_FFFFu32).filter(|&v| decode_gt_pixel(v).is_ok()).collect();
        assert_eq!(legal.len(), 16);
        let e = ClassEncoding::hisdb();
        for i in 0..8u8 {
            for b in [false, true] {
                let v = e.encode(i, b).unwrap();
                assert_eq!(e.decode(v).unwrap(), i);
                assert_eq!(is_boundary(v), b);
            }
        }
        assert!(e.encode(8, false).is_err());
    }
}
