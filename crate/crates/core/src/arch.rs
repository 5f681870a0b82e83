//! Architecture strings.
//!
//! Grammar (tokens joined by `-`):
//!
//! | token                  | meaning                                            |
//! |------------------------|----------------------------------------------------|
//! | `c64k3s1p1`            | conv, 64 output channels, kernel 3, stride 1, pad 1 (`pN` optional, default 0) |
//! | `BN`                   | batch normalisation                                |
//! | `LIF`                  | LIF neuron layer                                   |
//! | `MPk3s2p1`             | max pooling                                        |
//! | `AdaptiveAP(48)`       | adaptive average pooling to 48×48                  |
//! | `AP`                   | global average pooling                             |
//! | `FC10`                 | fully connected, 10 outputs                        |
//! | `(OR-SEW Block(c128))` | residual block, 128 channels, stride 2 (`c64s1` for stride 1) |
//! | `{...}*4`              | the body repeated four times                       |
//! | `MA` / `IA`            | promoting / inhibitory attention insertion point   |
//!
//! The label before `Block(` is informational; the join function of a
//! network is chosen separately.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ArchToken {
    Conv { channels: usize, kernel: usize, stride: usize, padding: usize },
    BatchNorm,
    Lif,
    MaxPool { kernel: usize, stride: usize, padding: usize },
    AdaptiveAvgPool { size: usize },
    GlobalAvgPool,
    Dense { features: usize },
    Block { channels: usize, stride: usize },
    Repeat { count: usize, body: Vec<ArchToken> },
    Ma,
    Ia,
}

impl fmt::Display for ArchToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ArchToken::Conv { channels, kernel, stride, padding } => {
                write!(f, "c{channels}k{kernel}s{stride}")?;
                if *padding > 0 {
                    write!(f, "p{padding}")?;
                }
                Ok(())
            }
            ArchToken::BatchNorm => f.write_str("BN"),
            ArchToken::Lif => f.write_str("LIF"),
            ArchToken::MaxPool { kernel, stride, padding } => {
                write!(f, "MPk{kernel}s{stride}")?;
                if *padding > 0 {
                    write!(f, "p{padding}")?;
                }
                Ok(())
            }
            ArchToken::AdaptiveAvgPool { size } => write!(f, "AdaptiveAP({size})"),
            ArchToken::GlobalAvgPool => f.write_str("AP"),
            ArchToken::Dense { features } => write!(f, "FC{features}"),
            ArchToken::Block { channels, stride } => {
                if *stride == 2 {
                    write!(f, "(OR-SEW Block(c{channels}))")
                } else {
                    write!(f, "(OR-SEW Block(c{channels}s{stride}))")
                }
            }
            ArchToken::Repeat { count, body } => write!(f, "{{{}}}*{count}", render(body)),
            ArchToken::Ma => f.write_str("MA"),
            ArchToken::Ia => f.write_str("IA"),
        }
    }
}

pub fn render(tokens: &[ArchToken]) -> String {
    tokens.iter().map(ToString::to_string).collect::<Vec<_>>().join("-")
}

/// Parses and expands repeats.
pub fn parse_arch(spec: &str) -> Result<Vec<ArchToken>> {
    Ok(expand(&parse_arch_compact(spec)?))
}

/// Parses keeping `Repeat` tokens.
pub fn parse_arch_compact(spec: &str) -> Result<Vec<ArchToken>> {
    let mut p = Parser { src: spec.as_bytes(), pos: 0 };
    p.skip_ws();
    let tokens = p.sequence(None)?;
    p.skip_ws();
    if p.pos != p.src.len() {
        return Err(p.err("unexpected trailing input"));
    }
    Ok(tokens)
}

pub fn expand(tokens: &[ArchToken]) -> Vec<ArchToken> {
    let mut out = Vec::new();
    for t in tokens {
        match t {
            ArchToken::Repeat { count, body } => {
                let inner = expand(body);
                for _ in 0..*count {
                    out.extend(inner.iter().cloned());
                }
            }
            other => out.push(other.clone()),
        }
    }
    out
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse { offset: self.pos, message: message.into() }
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(b' ' | b'\n' | b'\t' | b'\r')) {
            self.pos += 1;
        }
    }

    fn sequence(&mut self, close: Option<u8>) -> Result<Vec<ArchToken>> {
        let mut tokens = Vec::new();
        loop {
            self.skip_ws();
            tokens.push(self.token()?);
            self.skip_ws();
            match self.peek() {
                Some(b'-') => {
                    self.pos += 1;
                }
                Some(c) if Some(c) == close => return Ok(tokens),
                None if close.is_none() => return Ok(tokens),
                None => return Err(self.err("unterminated group")),
                Some(c) => return Err(self.err(format!("unexpected character {:?}", c as char))),
            }
        }
    }

    fn number(&mut self) -> Result<usize> {
        let start = self.pos;
        while matches!(self.peek(), Some(b'0'..=b'9')) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err("expected a number"));
        }
        std::str::from_utf8(&self.src[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| Error::Parse { offset: start, message: "number out of range".into() })
    }

    fn eat(&mut self, lit: &str) -> bool {
        if self.src[self.pos..].starts_with(lit.as_bytes()) {
            self.pos += lit.len();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, lit: &str) -> Result<()> {
        if self.eat(lit) {
            Ok(())
        } else {
            Err(self.err(format!("expected {lit:?}")))
        }
    }

    /// `kNsM[pP]`
    fn window(&mut self) -> Result<(usize, usize, usize)> {
        self.expect("k")?;
        let k = self.number()?;
        self.expect("s")?;
        let s = self.number()?;
        let p = if self.eat("p") { self.number()? } else { 0 };
        Ok((k, s, p))
    }

    fn token(&mut self) -> Result<ArchToken> {
        let start = self.pos;
        let tok = match self.peek() {
            Some(b'{') => {
                self.pos += 1;
                let body = self.sequence(Some(b'}'))?;
                self.expect("}")?;
                if !self.eat("*") {
                    return Err(self.err("malformed repeat: expected '*' after '}'"));
                }
                let count = self.number()?;
                if count == 0 {
                    return Err(Error::Parse { offset: start, message: "repeat count must be positive".into() });
                }
                ArchToken::Repeat { count, body }
            }
            Some(b'(') => {
                self.pos += 1;
                let rest = &self.src[self.pos..];
                let Some(at) = rest.windows(6).position(|w| w == b"Block(") else {
                    return Err(self.err("expected '<label> Block(cN)'"));
                };
                self.pos += at + 6;
                self.expect("c")?;
                let channels = self.number()?;
                let stride = if self.eat("s") { self.number()? } else { 2 };
                self.expect(")")?;
                self.skip_ws();
                self.expect(")")?;
                ArchToken::Block { channels, stride }
            }
            Some(b'c') => {
                self.pos += 1;
                let channels = self.number()?;
                let (kernel, stride, padding) = self.window()?;
                ArchToken::Conv { channels, kernel, stride, padding }
            }
            _ if self.eat("BN") => ArchToken::BatchNorm,
            _ if self.eat("LIF") => ArchToken::Lif,
            _ if self.eat("MP") => {
                let (kernel, stride, padding) = self.window()?;
                ArchToken::MaxPool { kernel, stride, padding }
            }
            _ if self.eat("AdaptiveAP(") => {
                let size = self.number()?;
                self.expect(")")?;
                ArchToken::AdaptiveAvgPool { size }
            }
            _ if self.eat("AP") => ArchToken::GlobalAvgPool,
            _ if self.eat("FC") => ArchToken::Dense { features: self.number()? },
            _ if self.eat("MA") => ArchToken::Ma,
            _ if self.eat("IA") => ArchToken::Ia,
            _ => return Err(self.err("unknown token")),
        };
        let positive = match &tok {
            ArchToken::Conv { channels, kernel, stride, .. } => *channels > 0 && *kernel > 0 && *stride > 0,
            ArchToken::MaxPool { kernel, stride, .. } => *kernel > 0 && *stride > 0,
            ArchToken::AdaptiveAvgPool { size } => *size > 0,
            ArchToken::Dense { features } => *features > 0,
            ArchToken::Block { channels, stride } => *channels > 0 && (*stride == 1 || *stride == 2),
            _ => true,
        };
        if !positive {
            return Err(Error::Parse { offset: start, message: "extents must be positive (block stride 1 or 2)".into() });
        }
        Ok(tok)
    }
}

/// Reference architectures for MNIST, DVS128 Gesture and CIFAR10-DVS.
pub mod presets {
    pub const MNIST: &str =
        "c64k3s1p1-BN-LIF-{c64k3s1p1-BN-LIF}*4-(OR-SEW Block(c128))-(OR-SEW Block(c256))-(OR-SEW Block(c512))-AP-FC10";
    pub const DVS_GESTURE: &str = "c64k7s2p3-BN-LIF-MPk3s2p1-{c64k3s1p1-BN-LIF}*4-(OR-SEW Block(c128))-(OR-SEW Block(c256))-(OR-SEW Block(c512))-AP-FC11";
    pub const CIFAR10_DVS: &str = "AdaptiveAP(48)-c64k3s2p1-BN-LIF-MPk3s2p1-{c64k3s1p1-BN-LIF}*4-(OR-SEW Block(c128))-(OR-SEW Block(c256))-(OR-SEW Block(c512))-AP-FC10";
    /// Desk-scale MNIST profile: encoder plus one OR-SEW block.
    pub const DESK_MNIST: &str = "c32k3s1p1-BN-LIF-(OR-SEW Block(c64))-AdaptiveAP(2)-FC10";
    /// Desk-scale synthetic-motion profile.
    pub const DESK_MOTION: &str = "c8k3s1p1-BN-LIF-(OR-SEW Block(c16))-AP-FC2";
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn conv_bn_lif() {
        assert_eq!(
            parse_arch("c64k3s1p1-BN-LIF").unwrap(),
            vec![ArchToken::Conv { channels: 64, kernel: 3, stride: 1, padding: 1 }, ArchToken::BatchNorm, ArchToken::Lif]
        );
    }

    #[test]
    fn repeat_expands() {
        assert_eq!(parse_arch("{c64k3s1p1-BN-LIF}*4").unwrap().len(), 12);
    }

    #[test]
    fn fc_and_block() {
        assert_eq!(parse_arch("FC10").unwrap(), vec![ArchToken::Dense { features: 10 }]);
        assert_eq!(parse_arch("(OR-SEW Block(c128))").unwrap(), vec![ArchToken::Block { channels: 128, stride: 2 }]);
    }

    #[test]
    fn presets_parse() {
        for p in [presets::MNIST, presets::DVS_GESTURE, presets::CIFAR10_DVS, presets::DESK_MNIST, presets::DESK_MOTION] {
            parse_arch(p).unwrap();
        }
        let t = parse_arch(presets::DVS_GESTURE).unwrap();
        assert_eq!(t[0], ArchToken::Conv { channels: 64, kernel: 7, stride: 2, padding: 3 });
        assert_eq!(t[3], ArchToken::MaxPool { kernel: 3, stride: 2, padding: 1 });
        assert_eq!(t.last(), Some(&ArchToken::Dense { features: 11 }));
    }

    #[test]
    fn errors_carry_offsets() {
        match parse_arch("c64k3s1-XYZ") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 8),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_arch("{BN-LIF}4"), Err(Error::Parse { .. })));
        assert!(matches!(parse_arch("{BN-LIF"), Err(Error::Parse { .. })));
        assert!(matches!(parse_arch("{BN}*0"), Err(Error::Parse { .. })));
    }

    fn token() -> impl Strategy<Value = ArchToken> {
        let leaf = prop_oneof![
            (1usize..600, 1usize..8, 1usize..3, 0usize..4)
                .prop_map(|(channels, kernel, stride, padding)| ArchToken::Conv { channels, kernel, stride, padding }),
            Just(ArchToken::BatchNorm),
            Just(ArchToken::Lif),
            (1usize..4, 1usize..3, 0usize..2).prop_map(|(kernel, stride, padding)| ArchToken::MaxPool { kernel, stride, padding }),
            (1usize..64).prop_map(|size| ArchToken::AdaptiveAvgPool { size }),
            Just(ArchToken::GlobalAvgPool),
            (1usize..100).prop_map(|features| ArchToken::Dense { features }),
            (1usize..600, 1usize..3).prop_map(|(channels, stride)| ArchToken::Block { channels, stride }),
            Just(ArchToken::Ma),
            Just(ArchToken::Ia),
        ];
        leaf.prop_recursive(2, 12, 4, |inner| {
            (1usize..5, proptest::collection::vec(inner, 1..4)).prop_map(|(count, body)| ArchToken::Repeat { count, body })
        })
    }

    proptest! {
        #[test]
        fn render_parse_round_trip(tokens in proptest::collection::vec(token(), 1..8)) {
            prop_assert_eq!(parse_arch_compact(&render(&tokens)).unwrap(), tokens);
        }
    }
}
