//! Rendered prompts against golden files transcribed independently of the
//! bundled templates.

use lppa_core::prompts::{build_aeg_prompt, build_task_prompt};
use lppa_core::synth::{build_spi_prompt, bundled_records, SimulatedIdentity};

const EXEMPLAR: &str = "Chief Complaint: Cardiac Arrest History Of Present Illness: [PERSON] is a [AGE] y.o. male \
with no known medical history brought in by EMS following cardiac arrest during intercourse...";

fn assert_same(name: &str, got: &str, want: &str) {
    if got == want {
        return;
    }
    let line = got.lines().zip(want.lines()).position(|(a, b)| a != b);
    panic!(
        "{name} differs (first differing line {line:?}, lengths {} vs {})\n--- got ---\n{got}\n--- want ---\n{want}",
        got.len(),
        want.len()
    );
}

fn isla_wilson() -> SimulatedIdentity {
    SimulatedIdentity {
        name: "Isla Wilson".into(),
        phone: "958-780-1849".into(),
        address: "5687 Cedar Boulevard, Dallas, TX 75250".into(),
        email: None,
        first_name: "Isla".into(),
        last_name: "Wilson".into(),
        street: "5687 Cedar Boulevard".into(),
        city: "Dallas".into(),
        state: "TX".into(),
        zip: "75250".into(),
    }
}

#[test]
fn task_prompt() {
    let req = build_task_prompt("X");
    assert_same("task system", &req.system, include_str!("golden/task_system.txt"));
    assert_same("task user", &req.user, include_str!("golden/task_user_note_X.txt"));
    assert_eq!(req.temperature, 0.0);
}

#[test]
fn aeg_prompt() {
    let req = build_aeg_prompt(&[]);
    assert_same("aeg system", &req.system, include_str!("golden/aeg_system.txt"));
    assert_same("aeg user", &req.user, include_str!("golden/aeg_user.txt"));
}

#[test]
fn spi_prompt_for_sample_record() {
    let record = &bundled_records()[0];
    let req = build_spi_prompt(record, &isla_wilson(), EXEMPLAR);
    assert_same("spi system", &req.system, include_str!("golden/spi_system.txt"));
    assert_same("spi user", &req.user, include_str!("golden/spi_user.txt"));
}
