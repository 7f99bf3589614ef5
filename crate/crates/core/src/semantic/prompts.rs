use std::fmt::Write as _;

use crate::data::GridSpec;

use super::{Prompt, PromptKind};

pub const WEEKDAYS: [&str; 7] = ["Monday", "Tuesday", "Wednesday", "Thursday", "Friday", "Saturday", "Sunday"];

/// Consecutive records at least this far apart (Chebyshev, in cells) are
/// reported as transitions.
pub const TRANSITION_MIN_STEP: u32 = 2;

/// One observed record of a day: slot index and grid cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DayRecord {
    pub slot: u32,
    pub cell: (u32, u32),
}

pub fn weekday_name(dow: u32) -> &'static str {
    WEEKDAYS[(dow % 7) as usize]
}

/// `HH:MM` for a half-hour slot; slot 48 renders as `24:00`.
pub fn slot_clock(slot: u32) -> String {
    format!("{:02}:{:02}", slot / 2, (slot % 2) * 30)
}

fn cell(c: (u32, u32)) -> String {
    format!("(X={}, Y={})", c.0, c.1)
}

fn chebyshev(a: (u32, u32), b: (u32, u32)) -> u32 {
    a.0.abs_diff(b.0).max(a.1.abs_diff(b.1))
}

fn join_or_none(items: Vec<String>) -> String {
    if items.is_empty() {
        "none".to_owned()
    } else {
        items.join("; ")
    }
}

/// Consecutive record pairs separated by a jump of at least
/// [`TRANSITION_MIN_STEP`] cells, as `(slot of arrival, from, to)`.
pub fn key_transitions(records: &[DayRecord]) -> Vec<(u32, (u32, u32), (u32, u32))> {
    records
        .windows(2)
        .filter(|w| chebyshev(w[0].cell, w[1].cell) >= TRANSITION_MIN_STEP)
        .map(|w| (w[1].slot, w[0].cell, w[1].cell))
        .collect()
}

/// Maximal runs of consecutive records at one cell, as
/// `(cell, first slot, last slot, record count)`.
pub fn stays(records: &[DayRecord]) -> Vec<((u32, u32), u32, u32, usize)> {
    let mut out: Vec<((u32, u32), u32, u32, usize)> = Vec::new();
    for r in records {
        match out.last_mut() {
            Some((c, _, last, n)) if *c == r.cell => {
                *last = r.slot;
                *n += 1;
            }
            _ => out.push((r.cell, r.slot, r.slot, 1)),
        }
    }
    out
}

/// Describes one day of a user's trajectory. `records` must be sorted by
/// slot.
pub fn render_history_prompt(user_id: u64, day: u32, dow: u32, records: &[DayRecord]) -> Prompt {
    let mut text = String::new();
    let lines: Vec<String> = records.iter().map(|r| format!("{}: {}", slot_clock(r.slot), cell(r.cell))).collect();
    let _ = write!(
        text,
        "This is the trajectory of user {user_id} of day {day} which is a {}. The trajectory consists of {} records, each record of coordinate is as follows: {}.",
        weekday_name(dow),
        records.len(),
        join_or_none(lines),
    );
    let transitions = key_transitions(records)
        .into_iter()
        .map(|(slot, from, to)| format!("At {}: {} → {}", slot_clock(slot), cell(from), cell(to)))
        .collect();
    let _ = write!(text, "\n\nKey transitions: {}.", join_or_none(transitions));
    let stays = stays(records)
        .into_iter()
        .map(|(c, first, last, n)| {
            format!("{} from {} to {} ({:.1} hours)", cell(c), slot_clock(first), slot_clock(last + 1), n as f64 * 0.5)
        })
        .collect();
    let _ = write!(text, "\n\nMain stay locations: {}.", join_or_none(stays));
    Prompt { kind: PromptKind::HistorySegment, text }
}

/// Frames the day-ahead prediction task for one user and target day.
pub fn render_task_prompt(user_id: u64, target_day: u32, dow: u32, grid: &GridSpec) -> Prompt {
    let (w, h) = (grid.width, grid.height);
    let text = format!(
        "You are a mobility prediction assistant that forecasts human movement patterns in urban environments. \
The city is represented as a {w} x {h} grid of cells, where each cell is identified by coordinates (X,Y). \
The X coordinate increases from left (0) to right ({}), and the Y coordinate increases from top (0) to bottom ({}).\n\n\
TASK: Based on User {user_id}'s historical movement patterns, predict their locations for Day {target_day} ({}). \
The predictions should capture expected locations at 30-minute intervals throughout the day (48 time slots). \
The model should analyze patterns like frequent locations, typical daily routines, and time-dependent behaviors \
to generate accurate predictions of where this user is likely to be throughout the next day.\n\n\
The previous days' trajectory data contains information about the user's typical movement patterns, \
regular visited locations, transition times, and duration of stays. Key patterns to consider include: \
home and work locations, morning and evening routines, lunch-time behaviors, weekend vs. weekday differences, \
and recurring visit patterns.",
        w.saturating_sub(1),
        h.saturating_sub(1),
        weekday_name(dow),
    );
    Prompt { kind: PromptKind::Task, text }
}
