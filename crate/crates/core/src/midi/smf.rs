//! Standard MIDI File reader and writer (formats 0 and 1, metrical division).

use std::collections::{BTreeMap, HashMap, VecDeque};

use super::{Instrument, NoteEvent, Piece, TempoChange, TimeSignature};
use crate::error::{Error, Result};

const DRUM_CHANNEL: u8 = 9;

/// A parsed file together with what the filters need to know about it.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedMidi {
    pub piece: Piece,
    pub format: u16,
    pub tracks: usize,
    /// Every time-signature event in tick order.
    pub time_signatures: Vec<(u64, TimeSignature)>,
    /// Note-ons still open at the end of their track; closed there.
    pub unmatched_note_ons: usize,
    pub orphan_note_offs: usize,
}

impl ParsedMidi {
    /// Wraps an already-built piece as if it had been read from a file with a
    /// single time-signature event.
    pub fn from_piece(piece: Piece) -> Self {
        let ts = piece.time_signature;
        Self {
            piece,
            format: 1,
            tracks: 1,
            time_signatures: vec![(0, ts)],
            unmatched_note_ons: 0,
            orphan_note_offs: 0,
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.err(format!("unexpected end of data reading {n} bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn vlq(&mut self) -> Result<u32> {
        let start = self.pos;
        let mut v: u32 = 0;
        for _ in 0..4 {
            let b = self.u8()?;
            v = (v << 7) | (b & 0x7f) as u32;
            if b & 0x80 == 0 {
                return Ok(v);
            }
        }
        Err(Error::Parse {
            offset: start,
            msg: "variable-length quantity longer than 4 bytes".into(),
        })
    }
}

#[derive(Debug, Clone, Copy)]
enum Event {
    NoteOn { channel: u8, pitch: u8, velocity: u8 },
    NoteOff { channel: u8, pitch: u8 },
    Program { channel: u8, program: u8 },
    Tempo(u32),
    TimeSig(TimeSignature),
}

struct TrackEvents {
    events: Vec<(u64, Event)>,
    end: u64,
}

fn parse_track(r: &mut Reader, len: usize) -> Result<TrackEvents> {
    let end_pos = r.pos + len;
    if end_pos > r.bytes.len() {
        return Err(r.err(format!("track chunk of {len} bytes runs past end of file")));
    }
    let mut tick: u64 = 0;
    let mut running: Option<u8> = None;
    let mut events = Vec::new();
    while r.pos < end_pos {
        tick += r.vlq()? as u64;
        let first = r.u8()?;
        let status = if first & 0x80 != 0 {
            first
        } else {
            let s = running.ok_or_else(|| Error::Parse {
                offset: r.pos - 1,
                msg: "data byte without running status".into(),
            })?;
            r.pos -= 1;
            s
        };
        match status {
            0xff => {
                running = None;
                let kind = r.u8()?;
                let n = r.vlq()? as usize;
                let data = r.take(n)?;
                match kind {
                    0x51 if n == 3 => {
                        let us = u32::from_be_bytes([0, data[0], data[1], data[2]]);
                        if us == 0 {
                            return Err(r.err("zero tempo"));
                        }
                        events.push((tick, Event::Tempo(us)));
                    }
                    0x58 if n >= 2 => {
                        if data[1] > 7 {
                            return Err(r.err("time-signature denominator exponent out of range"));
                        }
                        events.push((
                            tick,
                            Event::TimeSig(TimeSignature {
                                numerator: data[0],
                                denominator: 1u8 << data[1],
                            }),
                        ));
                    }
                    0x2f => break,
                    _ => {}
                }
            }
            0xf0 | 0xf7 => {
                running = None;
                let n = r.vlq()? as usize;
                r.take(n)?;
            }
            0xf1..=0xfe => return Err(r.err(format!("unexpected system message {status:#04x}"))),
            _ => {
                running = Some(status);
                let channel = status & 0x0f;
                match status & 0xf0 {
                    0x80 => {
                        let pitch = r.u8()? & 0x7f;
                        r.u8()?;
                        events.push((tick, Event::NoteOff { channel, pitch }));
                    }
                    0x90 => {
                        let pitch = r.u8()? & 0x7f;
                        let velocity = r.u8()? & 0x7f;
                        let e = if velocity == 0 {
                            Event::NoteOff { channel, pitch }
                        } else {
                            Event::NoteOn {
                                channel,
                                pitch,
                                velocity,
                            }
                        };
                        events.push((tick, e));
                    }
                    0xc0 => {
                        let program = r.u8()? & 0x7f;
                        events.push((tick, Event::Program { channel, program }));
                    }
                    0xd0 => {
                        r.u8()?;
                    }
                    _ => {
                        r.take(2)?;
                    }
                }
            }
        }
    }
    if r.pos > end_pos {
        return Err(r.err("event runs past end of track chunk"));
    }
    r.pos = end_pos;
    Ok(TrackEvents { events, end: tick })
}

/// Reads a format-0 or format-1 Standard MIDI File.
///
/// Tracks are merged in `(tick, track, event)` order; program changes apply
/// per channel across tracks. Channel 10 notes become drums.
pub fn parse_midi(bytes: &[u8]) -> Result<ParsedMidi> {
    if bytes.is_empty() {
        return Err(Error::Parse {
            offset: 0,
            msg: "empty input".into(),
        });
    }
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != b"MThd" {
        return Err(Error::Parse {
            offset: 0,
            msg: "missing MThd header".into(),
        });
    }
    let hlen = r.u32()? as usize;
    if hlen < 6 {
        return Err(r.err(format!("header length {hlen} < 6")));
    }
    let format = r.u16()?;
    let ntracks = r.u16()? as usize;
    let division_at = r.pos;
    let division = r.u16()?;
    r.take(hlen - 6)?;
    if format > 1 {
        return Err(Error::Parse {
            offset: 8,
            msg: format!("unsupported SMF format {format}"),
        });
    }
    if division & 0x8000 != 0 || division == 0 {
        return Err(Error::Parse {
            offset: division_at,
            msg: "only metrical (ticks per quarter) division is supported".into(),
        });
    }

    let mut tracks = Vec::with_capacity(ntracks);
    while tracks.len() < ntracks {
        let at = r.pos;
        let id = r.take(4)?;
        let len = r.u32()? as usize;
        if id == b"MTrk" {
            tracks.push(parse_track(&mut r, len)?);
        } else if id.iter().all(|b| b.is_ascii_graphic()) {
            r.take(len)?;
        } else {
            return Err(Error::Parse {
                offset: at,
                msg: "malformed chunk header".into(),
            });
        }
    }

    let mut merged: Vec<(u64, usize, usize, Event)> = Vec::new();
    for (t, tr) in tracks.iter().enumerate() {
        for (k, &(tick, e)) in tr.events.iter().enumerate() {
            merged.push((tick, t, k, e));
        }
    }
    merged.sort_by_key(|&(tick, t, k, _)| (tick, t, k));

    let mut program = [0u8; 16];
    let mut open: HashMap<(usize, u8, u8), VecDeque<(u64, u8, Instrument)>> = HashMap::new();
    let mut notes = Vec::new();
    let mut tempo: BTreeMap<u64, u32> = BTreeMap::new();
    let mut time_signatures = Vec::new();
    let mut orphan_note_offs = 0;
    for &(tick, track, _, e) in &merged {
        match e {
            Event::Program { channel, program: p } => program[channel as usize] = p,
            Event::NoteOn {
                channel,
                pitch,
                velocity,
            } => {
                let instrument = if channel == DRUM_CHANNEL {
                    Instrument::DRUMS
                } else {
                    Instrument::program(program[channel as usize])
                };
                open.entry((track, channel, pitch))
                    .or_default()
                    .push_back((tick, velocity, instrument));
            }
            Event::NoteOff { channel, pitch } => {
                match open.get_mut(&(track, channel, pitch)).and_then(|q| q.pop_front()) {
                    Some((onset, velocity, instrument)) => notes.push(NoteEvent {
                        onset,
                        pitch,
                        duration: (tick - onset).max(1),
                        velocity,
                        instrument,
                    }),
                    None => orphan_note_offs += 1,
                }
            }
            Event::Tempo(us) => {
                tempo.insert(tick, us);
            }
            Event::TimeSig(ts) => time_signatures.push((tick, ts)),
        }
    }
    let mut unmatched_note_ons = 0;
    let mut leftovers: Vec<_> = open.into_iter().collect();
    leftovers.sort_by_key(|(k, _)| *k);
    for ((track, _, pitch), queue) in leftovers {
        for (onset, velocity, instrument) in queue {
            unmatched_note_ons += 1;
            notes.push(NoteEvent {
                onset,
                pitch,
                duration: tracks[track].end.saturating_sub(onset).max(1),
                velocity,
                instrument,
            });
        }
    }

    let mut piece = Piece::new(
        division as u32,
        time_signatures.first().map(|&(_, ts)| ts).unwrap_or(TimeSignature::COMMON),
        "",
    );
    piece.notes = notes;
    piece.sort_notes();
    piece.tempo_changes = tempo
        .into_iter()
        .map(|(tick, micros_per_quarter)| TempoChange {
            tick,
            micros_per_quarter,
        })
        .collect();
    Ok(ParsedMidi {
        piece,
        format,
        tracks: ntracks,
        time_signatures,
        unmatched_note_ons,
        orphan_note_offs,
    })
}

fn push_vlq(out: &mut Vec<u8>, mut v: u64) {
    let mut buf = [0u8; 10];
    let mut n = 0;
    loop {
        buf[n] = (v & 0x7f) as u8;
        n += 1;
        v >>= 7;
        if v == 0 {
            break;
        }
    }
    for i in (0..n).rev() {
        out.push(if i > 0 { buf[i] | 0x80 } else { buf[i] });
    }
}

/// Events of one track as `(tick, order, bytes)`; `order` breaks tick ties.
fn track_chunk(mut events: Vec<(u64, u8, Vec<u8>)>) -> Vec<u8> {
    events.sort_by_key(|(tick, order, _)| (*tick, *order));
    let mut body = Vec::new();
    let mut last = 0;
    for (tick, _, bytes) in &events {
        push_vlq(&mut body, tick - last);
        body.extend_from_slice(bytes);
        last = *tick;
    }
    push_vlq(&mut body, 0);
    body.extend_from_slice(&[0xff, 0x2f, 0x00]);
    let mut chunk = b"MTrk".to_vec();
    chunk.extend_from_slice(&(body.len() as u32).to_be_bytes());
    chunk.extend_from_slice(&body);
    chunk
}

/// Writes a format-1 file with `piece.resolution` ticks per quarter: a
/// conductor track for meter and tempo, then one track per instrument.
///
/// Pitched instruments take channels 1-9 and 11-16 in ascending instrument
/// order, cycling when there are more than fifteen; drums use channel 10.
/// Overlapping notes of the same pitch and instrument go to an extra track
/// so every note-off pairs with the right note-on when read back.
pub fn write_midi(piece: &Piece) -> Result<Vec<u8>> {
    if piece.notes.is_empty() {
        return Err(Error::Data("piece has no notes to write".into()));
    }
    if piece.resolution == 0 || piece.resolution > 0x7fff {
        return Err(Error::Data(format!(
            "resolution {} cannot be stored as a MIDI division",
            piece.resolution
        )));
    }
    let ts = piece.time_signature;
    if !ts.denominator.is_power_of_two() {
        return Err(Error::Data(format!("time signature {ts} has a non power-of-two denominator")));
    }

    let mut conductor = vec![(
        0,
        0,
        vec![0xff, 0x58, 4, ts.numerator, ts.denominator.trailing_zeros() as u8, 24, 8],
    )];
    for t in &piece.tempo_changes {
        let b = t.micros_per_quarter.to_be_bytes();
        conductor.push((t.tick, 1, vec![0xff, 0x51, 3, b[1], b[2], b[3]]));
    }
    let mut chunks = vec![track_chunk(conductor)];

    let instruments = piece.instruments();
    let pitched: Vec<Instrument> = instruments.iter().copied().filter(|i| !i.is_drum).collect();
    let channel_of = |inst: &Instrument| -> u8 {
        if inst.is_drum {
            return DRUM_CHANNEL;
        }
        let k = pitched.iter().position(|p| p == inst).expect("known instrument") % 15;
        if k >= DRUM_CHANNEL as usize {
            k as u8 + 1
        } else {
            k as u8
        }
    };
    let shared = pitched.len() > 15;

    for inst in &instruments {
        let ch = channel_of(inst);
        // layers[k]: pitch -> end tick of the last note placed there
        let mut layers: Vec<HashMap<u8, u64>> = Vec::new();
        let mut layer_events: Vec<Vec<(u64, u8, Vec<u8>)>> = Vec::new();
        for n in piece.notes.iter().filter(|n| n.instrument == *inst) {
            let k = layers
                .iter()
                .position(|l| l.get(&n.pitch).is_none_or(|&end| end <= n.onset))
                .unwrap_or_else(|| {
                    layers.push(HashMap::new());
                    layer_events.push(Vec::new());
                    layers.len() - 1
                });
            layers[k].insert(n.pitch, n.onset + n.duration);
            let ev = &mut layer_events[k];
            if !inst.is_drum && (shared || ev.is_empty()) {
                ev.push((n.onset, 1, vec![0xc0 | ch, inst.program]));
            }
            ev.push((n.onset, 2, vec![0x90 | ch, n.pitch, n.velocity.max(1)]));
            ev.push((n.onset + n.duration, 0, vec![0x80 | ch, n.pitch, 0x40]));
        }
        for ev in layer_events {
            chunks.push(track_chunk(ev));
        }
    }

    let mut out = b"MThd".to_vec();
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&(chunks.len() as u16).to_be_bytes());
    out.extend_from_slice(&(piece.resolution as u16).to_be_bytes());
    for c in chunks {
        out.extend_from_slice(&c);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_note_file() -> Vec<u8> {
        let mut f = b"MThd".to_vec();
        f.extend_from_slice(&[0, 0, 0, 6, 0, 0, 0, 1, 0x01, 0xe0]);
        let body = [
            0x00, 0x90, 60, 100, // note on
            0x83, 0x60, 0x80, 60, 0, // 480 ticks later, note off
            0x00, 0xff, 0x2f, 0x00,
        ];
        f.extend_from_slice(b"MTrk");
        f.extend_from_slice(&(body.len() as u32).to_be_bytes());
        f.extend_from_slice(&body);
        f
    }

    #[test]
    fn single_note() {
        let p = parse_midi(&single_note_file()).unwrap();
        assert_eq!(p.piece.resolution, 480);
        assert_eq!(
            p.piece.notes,
            vec![NoteEvent {
                onset: 0,
                pitch: 60,
                duration: 480,
                velocity: 100,
                instrument: Instrument::program(0),
            }]
        );
        assert!(p.time_signatures.is_empty());
    }

    #[test]
    fn empty_and_truncated_inputs_fail_with_offsets() {
        assert!(matches!(parse_midi(&[]), Err(Error::Parse { offset: 0, .. })));
        let f = single_note_file();
        let err = parse_midi(&f[..f.len() - 6]).unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 22, .. }), "{err}");
    }

    #[test]
    fn unmatched_note_on_closes_at_track_end() {
        let mut f = b"MThd".to_vec();
        f.extend_from_slice(&[0, 0, 0, 6, 0, 0, 0, 1, 0, 96]);
        let body = [0x00, 0x90, 64, 80, 0x60, 0xff, 0x2f, 0x00];
        f.extend_from_slice(b"MTrk");
        f.extend_from_slice(&(body.len() as u32).to_be_bytes());
        f.extend_from_slice(&body);
        let p = parse_midi(&f).unwrap();
        assert_eq!(p.unmatched_note_ons, 1);
        assert_eq!(p.piece.notes[0].duration, 96);
    }

    #[test]
    fn vlq_round_trip() {
        for v in [0u64, 1, 127, 128, 480, 16383, 16384, 0x0fff_ffff] {
            let mut b = Vec::new();
            push_vlq(&mut b, v);
            let mut r = Reader { bytes: &b, pos: 0 };
            assert_eq!(r.vlq().unwrap() as u64, v);
            assert_eq!(r.pos, b.len());
        }
    }
}
