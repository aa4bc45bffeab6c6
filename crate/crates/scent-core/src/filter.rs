//! Wireshark-style display-filter subset over dissected 802.15.4 frames.
//!
//! Grammar (standard precedence, `!` > comparison > `&&` > `||`):
//!
//! ```text
//! expr    := or
//! or      := and ("||" and)*
//! and     := unary ("&&" unary)*
//! unary   := "!" unary | primary
//! primary := "(" expr ")" | field op literal | field
//! ```
//!
//! A bare field name tests for presence. Comparisons against an absent field
//! evaluate to false, matching Wireshark behavior.

use std::fmt;

use thiserror::Error;

use crate::codec::{Addr, Dissected, FcsStatus};

/// The supported field set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Field {
    WpanFrameType,
    WpanSeqNo,
    WpanDstPan,
    WpanSrcPan,
    WpanDst16,
    WpanSrc16,
    WpanDst64,
    WpanSrc64,
    WpanAckRequest,
    WpanFcsOk,
    ZbeeNwkSrc,
    ZbeeNwkDst,
    ZbeeNwkRadius,
    FrameLen,
}

pub const ALL_FIELDS: [Field; 14] = [
    Field::WpanFrameType,
    Field::WpanSeqNo,
    Field::WpanDstPan,
    Field::WpanSrcPan,
    Field::WpanDst16,
    Field::WpanSrc16,
    Field::WpanDst64,
    Field::WpanSrc64,
    Field::WpanAckRequest,
    Field::WpanFcsOk,
    Field::ZbeeNwkSrc,
    Field::ZbeeNwkDst,
    Field::ZbeeNwkRadius,
    Field::FrameLen,
];

impl Field {
    pub fn name(&self) -> &'static str {
        match self {
            Field::WpanFrameType => "wpan.frame_type",
            Field::WpanSeqNo => "wpan.seq_no",
            Field::WpanDstPan => "wpan.dst_pan",
            Field::WpanSrcPan => "wpan.src_pan",
            Field::WpanDst16 => "wpan.dst16",
            Field::WpanSrc16 => "wpan.src16",
            Field::WpanDst64 => "wpan.dst64",
            Field::WpanSrc64 => "wpan.src64",
            Field::WpanAckRequest => "wpan.ack_request",
            Field::WpanFcsOk => "wpan.fcs_ok",
            Field::ZbeeNwkSrc => "zbee_nwk.src",
            Field::ZbeeNwkDst => "zbee_nwk.dst",
            Field::ZbeeNwkRadius => "zbee_nwk.radius",
            Field::FrameLen => "frame.len",
        }
    }

    fn from_name(name: &str) -> Option<Field> {
        ALL_FIELDS.iter().copied().find(|f| f.name() == name)
    }

    /// Field width in bits; literals must fit.
    pub fn width(&self) -> u32 {
        match self {
            Field::WpanFrameType | Field::WpanSeqNo | Field::ZbeeNwkRadius => 8,
            Field::WpanDstPan
            | Field::WpanSrcPan
            | Field::WpanDst16
            | Field::WpanSrc16
            | Field::ZbeeNwkSrc
            | Field::ZbeeNwkDst => 16,
            Field::WpanDst64 | Field::WpanSrc64 => 64,
            Field::WpanAckRequest | Field::WpanFcsOk => 1,
            Field::FrameLen => 32,
        }
    }

    /// Extract the field from a dissected frame, `None` when absent.
    pub fn extract(&self, frame: &Dissected) -> Option<u64> {
        let mac = frame.mac.as_ref();
        match self {
            Field::FrameLen => Some(frame.raw.bytes.len() as u64),
            Field::WpanFrameType => mac.map(|m| m.frame_type.to_bits() as u64),
            Field::WpanSeqNo => mac.map(|m| m.seq_no as u64),
            Field::WpanDstPan => mac.and_then(|m| m.dst_pan).map(u64::from),
            Field::WpanSrcPan => mac.and_then(|m| m.src_pan).map(u64::from),
            Field::WpanDst16 => mac.and_then(|m| match m.dst_addr {
                Some(Addr::Short(a)) => Some(a as u64),
                _ => None,
            }),
            Field::WpanSrc16 => mac.and_then(|m| match m.src_addr {
                Some(Addr::Short(a)) => Some(a as u64),
                _ => None,
            }),
            Field::WpanDst64 => mac.and_then(|m| match m.dst_addr {
                Some(Addr::Extended(a)) => Some(a),
                _ => None,
            }),
            Field::WpanSrc64 => mac.and_then(|m| match m.src_addr {
                Some(Addr::Extended(a)) => Some(a),
                _ => None,
            }),
            Field::WpanAckRequest => mac.map(|m| m.ack_request as u64),
            Field::WpanFcsOk => mac.and_then(|m| match m.fcs_ok {
                FcsStatus::Valid => Some(1),
                FcsStatus::Invalid => Some(0),
                FcsStatus::Absent => None,
            }),
            Field::ZbeeNwkSrc => frame.nwk.map(|n| n.src as u64),
            Field::ZbeeNwkDst => frame.nwk.map(|n| n.dst as u64),
            Field::ZbeeNwkRadius => frame.nwk.map(|n| n.radius as u64),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CmpOp {
    pub fn apply(&self, lhs: u64, rhs: u64) -> bool {
        match self {
            CmpOp::Eq => lhs == rhs,
            CmpOp::Ne => lhs != rhs,
            CmpOp::Lt => lhs < rhs,
            CmpOp::Le => lhs <= rhs,
            CmpOp::Gt => lhs > rhs,
            CmpOp::Ge => lhs >= rhs,
        }
    }

    pub fn symbol(&self) -> &'static str {
        match self {
            CmpOp::Eq => "==",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
        }
    }
}

/// Filter AST; immutable after parse, evaluation is total.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FilterExpr {
    And(Box<FilterExpr>, Box<FilterExpr>),
    Or(Box<FilterExpr>, Box<FilterExpr>),
    Not(Box<FilterExpr>),
    Compare(Field, CmpOp, u64),
    Exists(Field),
}

impl fmt::Display for FilterExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FilterExpr::And(a, b) => write!(f, "({a} && {b})"),
            FilterExpr::Or(a, b) => write!(f, "({a} || {b})"),
            FilterExpr::Not(e) => write!(f, "!({e})"),
            FilterExpr::Compare(field, op, lit) => {
                write!(f, "{} {} 0x{lit:x}", field.name(), op.symbol())
            }
            FilterExpr::Exists(field) => write!(f, "{}", field.name()),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FilterError {
    #[error("syntax error at position {position}: expected {expected}")]
    Syntax { position: usize, expected: String },
    #[error("unknown field `{0}`")]
    UnknownField(String),
    #[error("literal 0x{literal:x} does not fit field `{field}` ({width} bits)")]
    TypeMismatch {
        field: String,
        literal: u64,
        width: u32,
    },
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Ident(String),
    Number(u64),
    Op(CmpOp),
    AndAnd,
    OrOr,
    Bang,
    LParen,
    RParen,
}

fn tokenize(text: &str) -> Result<Vec<(usize, Token)>, FilterError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            ' ' | '\t' | '\n' | '\r' => i += 1,
            '(' => {
                out.push((i, Token::LParen));
                i += 1;
            }
            ')' => {
                out.push((i, Token::RParen));
                i += 1;
            }
            '&' => {
                if bytes.get(i + 1) == Some(&b'&') {
                    out.push((i, Token::AndAnd));
                    i += 2;
                } else {
                    return Err(FilterError::Syntax {
                        position: i,
                        expected: "`&&`".into(),
                    });
                }
            }
            '|' => {
                if bytes.get(i + 1) == Some(&b'|') {
                    out.push((i, Token::OrOr));
                    i += 2;
                } else {
                    return Err(FilterError::Syntax {
                        position: i,
                        expected: "`||`".into(),
                    });
                }
            }
            '=' => {
                if bytes.get(i + 1) == Some(&b'=') {
                    out.push((i, Token::Op(CmpOp::Eq)));
                    i += 2;
                } else {
                    return Err(FilterError::Syntax {
                        position: i,
                        expected: "`==`".into(),
                    });
                }
            }
            '!' => {
                if bytes.get(i + 1) == Some(&b'=') {
                    out.push((i, Token::Op(CmpOp::Ne)));
                    i += 2;
                } else {
                    out.push((i, Token::Bang));
                    i += 1;
                }
            }
            '<' => {
                if bytes.get(i + 1) == Some(&b'=') {
                    out.push((i, Token::Op(CmpOp::Le)));
                    i += 2;
                } else {
                    out.push((i, Token::Op(CmpOp::Lt)));
                    i += 1;
                }
            }
            '>' => {
                if bytes.get(i + 1) == Some(&b'=') {
                    out.push((i, Token::Op(CmpOp::Ge)));
                    i += 2;
                } else {
                    out.push((i, Token::Op(CmpOp::Gt)));
                    i += 1;
                }
            }
            '0'..='9' => {
                let start = i;
                let value = if c == '0' && matches!(bytes.get(i + 1), Some(b'x') | Some(b'X')) {
                    i += 2;
                    let hex_start = i;
                    while i < bytes.len() && (bytes[i] as char).is_ascii_hexdigit() {
                        i += 1;
                    }
                    if i == hex_start {
                        return Err(FilterError::Syntax {
                            position: i,
                            expected: "hex digits".into(),
                        });
                    }
                    u64::from_str_radix(&text[hex_start..i], 16).map_err(|_| {
                        FilterError::Syntax {
                            position: start,
                            expected: "a 64-bit literal".into(),
                        }
                    })?
                } else {
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                    text[start..i].parse().map_err(|_| FilterError::Syntax {
                        position: start,
                        expected: "a 64-bit literal".into(),
                    })?
                };
                out.push((start, Token::Number(value)));
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let start = i;
                while i < bytes.len() {
                    let c = bytes[i] as char;
                    if c.is_ascii_alphanumeric() || c == '_' || c == '.' {
                        i += 1;
                    } else {
                        break;
                    }
                }
                out.push((start, Token::Ident(text[start..i].to_string())));
            }
            _ => {
                return Err(FilterError::Syntax {
                    position: i,
                    expected: "a field, literal, operator or parenthesis".into(),
                });
            }
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<(usize, Token)>,
    pos: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos).map(|(_, t)| t)
    }

    fn position(&self) -> usize {
        self.tokens
            .get(self.pos)
            .map(|(p, _)| *p)
            .unwrap_or(self.end)
    }

    fn bump(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.pos).map(|(_, t)| t.clone());
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn or_expr(&mut self) -> Result<FilterExpr, FilterError> {
        let mut lhs = self.and_expr()?;
        while matches!(self.peek(), Some(Token::OrOr)) {
            self.bump();
            let rhs = self.and_expr()?;
            lhs = FilterExpr::Or(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn and_expr(&mut self) -> Result<FilterExpr, FilterError> {
        let mut lhs = self.unary()?;
        while matches!(self.peek(), Some(Token::AndAnd)) {
            self.bump();
            let rhs = self.unary()?;
            lhs = FilterExpr::And(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<FilterExpr, FilterError> {
        if matches!(self.peek(), Some(Token::Bang)) {
            self.bump();
            return Ok(FilterExpr::Not(Box::new(self.unary()?)));
        }
        self.primary()
    }

    fn primary(&mut self) -> Result<FilterExpr, FilterError> {
        match self.bump() {
            Some(Token::LParen) => {
                let inner = self.or_expr()?;
                match self.bump() {
                    Some(Token::RParen) => Ok(inner),
                    _ => Err(FilterError::Syntax {
                        position: self.position(),
                        expected: "`)`".into(),
                    }),
                }
            }
            Some(Token::Ident(name)) => {
                let field = Field::from_name(&name)
                    .ok_or_else(|| FilterError::UnknownField(name.clone()))?;
                if let Some(Token::Op(op)) = self.peek().cloned() {
                    self.bump();
                    let pos = self.position();
                    match self.bump() {
                        Some(Token::Number(lit)) => {
                            let width = field.width();
                            if width < 64 && lit >> width != 0 {
                                return Err(FilterError::TypeMismatch {
                                    field: field.name().to_string(),
                                    literal: lit,
                                    width,
                                });
                            }
                            Ok(FilterExpr::Compare(field, op, lit))
                        }
                        _ => Err(FilterError::Syntax {
                            position: pos,
                            expected: "a numeric literal".into(),
                        }),
                    }
                } else {
                    Ok(FilterExpr::Exists(field))
                }
            }
            _ => Err(FilterError::Syntax {
                position: self.position(),
                expected: "a field, `!` or `(`".into(),
            }),
        }
    }
}

/// Parse a filter string into an AST.
pub fn parse_filter(text: &str) -> Result<FilterExpr, FilterError> {
    let tokens = tokenize(text)?;
    if tokens.is_empty() {
        return Err(FilterError::Syntax {
            position: 0,
            expected: "a non-empty filter expression".into(),
        });
    }
    let mut parser = Parser {
        tokens,
        pos: 0,
        end: text.len(),
    };
    let expr = parser.or_expr()?;
    if parser.peek().is_some() {
        return Err(FilterError::Syntax {
            position: parser.position(),
            expected: "end of input".into(),
        });
    }
    Ok(expr)
}

/// Evaluate a filter against a dissected frame. Total, side-effect free.
pub fn eval_filter(expr: &FilterExpr, frame: &Dissected) -> bool {
    match expr {
        FilterExpr::And(a, b) => eval_filter(a, frame) && eval_filter(b, frame),
        FilterExpr::Or(a, b) => eval_filter(a, frame) || eval_filter(b, frame),
        FilterExpr::Not(e) => !eval_filter(e, frame),
        FilterExpr::Compare(field, op, lit) => match field.extract(frame) {
            Some(value) => op.apply(value, *lit),
            None => false,
        },
        FilterExpr::Exists(field) => field.extract(frame).is_some(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{MacFrame, RawFrame};

    fn dissect(frame: &MacFrame) -> Dissected {
        let bytes = crate::codec::serialize_mac_frame(frame, false).unwrap();
        Dissected::dissect(RawFrame::new(bytes, 0), false)
    }

    #[test]
    fn parse_compound_expression() {
        let expr = parse_filter("wpan.src16 == 0x1234 && !(wpan.frame_type == 2)").unwrap();
        assert_eq!(
            expr,
            FilterExpr::And(
                Box::new(FilterExpr::Compare(Field::WpanSrc16, CmpOp::Eq, 0x1234)),
                Box::new(FilterExpr::Not(Box::new(FilterExpr::Compare(
                    Field::WpanFrameType,
                    CmpOp::Eq,
                    2
                ))))
            )
        );
    }

    #[test]
    fn unknown_field() {
        assert_eq!(
            parse_filter("wpan.bogus == 1"),
            Err(FilterError::UnknownField("wpan.bogus".into()))
        );
    }

    #[test]
    fn literal_exceeds_field_width() {
        assert!(matches!(
            parse_filter("wpan.dst_pan == 0x1ffff"),
            Err(FilterError::TypeMismatch { width: 16, .. })
        ));
    }

    #[test]
    fn syntax_error_carries_position() {
        match parse_filter("wpan.seq_no == ") {
            Err(FilterError::Syntax { position, .. }) => assert_eq!(position, 15),
            other => panic!("expected syntax error, got {other:?}"),
        }
    }

    #[test]
    fn ack_frame_type_matches() {
        let expr = parse_filter("wpan.frame_type == 2").unwrap();
        assert!(eval_filter(&expr, &dissect(&MacFrame::ack(1))));
    }

    #[test]
    fn absent_field_compares_false() {
        let expr = parse_filter("zbee_nwk.src == 0x1234").unwrap();
        assert!(!eval_filter(&expr, &dissect(&MacFrame::ack(1))));
        // ... but negation of an absent-field compare is true
        let neg = parse_filter("!(zbee_nwk.src == 0x1234)").unwrap();
        assert!(eval_filter(&neg, &dissect(&MacFrame::ack(1))));
    }

    #[test]
    fn exists_is_presence() {
        let expr = parse_filter("wpan.src16").unwrap();
        assert_eq!(expr, FilterExpr::Exists(Field::WpanSrc16));
        assert!(!eval_filter(&expr, &dissect(&MacFrame::ack(1))));
        let data = MacFrame::data(0, 1, Addr::Short(2), Addr::Short(3), vec![]);
        assert!(eval_filter(&expr, &dissect(&data)));
    }

    #[test]
    fn precedence_or_binds_loosest() {
        let expr =
            parse_filter("wpan.seq_no == 1 || wpan.seq_no == 2 && wpan.ack_request == 1").unwrap();
        assert!(matches!(expr, FilterExpr::Or(_, _)));
    }

    #[test]
    fn display_round_trips() {
        let text = "wpan.src16 == 0x1234 && !(wpan.frame_type == 2) || frame.len >= 10";
        let expr = parse_filter(text).unwrap();
        let reparsed = parse_filter(&expr.to_string()).unwrap();
        assert_eq!(expr, reparsed);
    }
}
