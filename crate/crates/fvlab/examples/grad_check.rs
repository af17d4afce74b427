//! Central-difference checks of every tape primitive and of the full
//! language-modeling and FV-guided losses on a two-layer model.

use fvlab::cli::{full_suite, GradCheckSettings};

fn main() -> fvlab::Result<()> {
    let s = GradCheckSettings::default();
    println!("eps {:e}, tol {:e}, up to {} coordinates per case", s.eps, s.tol, s.coords);
    let lines = full_suite(&s)?;
    for l in &lines {
        let mark = if l.passed { "ok  " } else { "FAIL" };
        println!("{mark} {:<24} {:>3} coords  max rel err {:.2e}", l.name, l.checked, l.max_rel_err);
    }
    let failed = lines.iter().filter(|l| !l.passed).count();
    println!("{} cases, {failed} failed", lines.len());
    Ok(())
}
