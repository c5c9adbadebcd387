use super::{EncoderArch, Family, HeadKind};
use crate::{Error, Result};

/// A parsed architecture descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Descriptor {
    pub encoder: EncoderArch,
    pub head: Option<HeadKind>,
}

fn number(s: &str, what: &str, full: &str) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|_| Error::Compatibility(format!("descriptor {full:?}: bad {what} {s:?}")))
}

fn args<'a>(s: &'a str, name: &str) -> Option<Vec<&'a str>> {
    let inner = s.strip_prefix(name)?.strip_prefix('(')?.strip_suffix(')')?;
    Some(inner.split(',').collect())
}

pub fn parse_descriptor(text: &str) -> Result<Descriptor> {
    let bad = |why: &str| Error::Compatibility(format!("descriptor {text:?}: {why}"));
    let (enc, head) = match text.split_once('+') {
        Some((e, h)) => (e, Some(h)),
        None => (text, None),
    };
    let parts: Vec<&str> = enc.split('/').collect();
    let [family, width, depth] = parts[..] else {
        return Err(bad("expected <family>/w<width>/d<depth>"));
    };
    let family = match family {
        "mini_res" => Family::MiniRes,
        "mini_plain" => Family::MiniPlain,
        other => return Err(bad(&format!("unknown family {other:?}"))),
    };
    let width = number(width.strip_prefix('w').ok_or_else(|| bad("width needs a w prefix"))?, "width", text)?;
    let depth = number(depth.strip_prefix('d').ok_or_else(|| bad("depth needs a d prefix"))?, "depth", text)?;
    let head = match head {
        None => None,
        Some(h) => Some(if let Some(a) = args(h, "proj") {
            let [hidden, output] = a[..] else { return Err(bad("proj takes two arguments")) };
            HeadKind::Projection { hidden: number(hidden, "hidden", text)?, output: number(output, "output", text)? }
        } else if let Some(a) = args(h, "linear") {
            let [classes] = a[..] else { return Err(bad("linear takes one argument")) };
            HeadKind::Linear { classes: number(classes, "classes", text)? }
        } else if let Some(a) = args(h, "dense") {
            let [hidden, classes] = a[..] else { return Err(bad("dense takes two arguments")) };
            HeadKind::Dense { hidden: number(hidden, "hidden", text)?, classes: number(classes, "classes", text)? }
        } else {
            return Err(bad(&format!("unknown head {h:?}")));
        }),
    };
    Ok(Descriptor { encoder: EncoderArch { family, width, depth }, head })
}
