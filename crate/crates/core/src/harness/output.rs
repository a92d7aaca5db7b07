use std::fmt::Write as _;
use std::io;

use nalgebra::DVector;
use serde::Serialize;

/// 17 significant digits; non-finite values are spelled `nan`, `inf`, `-inf`.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "nan".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

/// JSON formatter writing every float with 17 significant digits.
struct PreciseFormatter(serde_json::ser::PrettyFormatter<'static>);

impl serde_json::ser::Formatter for PreciseFormatter {
    fn write_f64<W: ?Sized + io::Write>(&mut self, w: &mut W, v: f64) -> io::Result<()> {
        w.write_all(format!("{v:.16e}").as_bytes())
    }
    fn begin_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }
    fn end_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }
    fn begin_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }
    fn begin_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }
    fn end_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }
    fn begin_object_key<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

/// Pretty JSON with 17-significant-digit floats; non-finite floats become `null`.
pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, PreciseFormatter(serde_json::ser::PrettyFormatter::new()));
    value.serialize(&mut ser).expect("in-memory serialization cannot fail");
    buf.push(b'\n');
    String::from_utf8(buf).expect("serde_json writes UTF-8")
}

pub fn trajectory_header(nx: usize, nu: usize) -> String {
    let mut h = String::from("trial,t,agent");
    for k in 0..nx {
        let _ = write!(h, ",x{k}");
    }
    for k in 0..nu {
        let _ = write!(h, ",u{k}");
    }
    h.push('\n');
    h
}

/// Rows `trial,t,agent,x…,u…` for `t = 0..=T`; the control fields are empty at `t = T`.
pub fn trajectory_rows(out: &mut String, trial: u64, states: &[Vec<DVector<f64>>], controls: &[Vec<DVector<f64>>], nu: usize) {
    for (i, (xs, us)) in states.iter().zip(controls).enumerate() {
        for (t, x) in xs.iter().enumerate() {
            let _ = write!(out, "{trial},{t},{i}");
            for v in x.iter() {
                let _ = write!(out, ",{}", fmt_f64(*v));
            }
            match us.get(t) {
                Some(u) => {
                    for v in u.iter() {
                        let _ = write!(out, ",{}", fmt_f64(*v));
                    }
                }
                None => out.push_str(&",".repeat(nu)),
            }
            out.push('\n');
        }
    }
}
