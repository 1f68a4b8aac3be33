//! The 61-class instrument table: 60 pitched classes over the General MIDI
//! programs plus one drum class.
//!
//! This grouping is this crate's own convention. Each class is represented
//! by one program; canonical pieces only use representative programs.

use crate::midi::Instrument;

/// `(representative, members)` per pitched class, in class order.
const GROUPS: [(u8, &[u8]); 60] = [
    // piano
    (0, &[0, 1, 3]),
    (2, &[2]),
    (4, &[4, 5]),
    (6, &[6]),
    (7, &[7]),
    // chromatic percussion
    (8, &[8, 9]),
    (10, &[10]),
    (11, &[11, 12]),
    (13, &[13]),
    (14, &[14, 15]),
    // organ
    (16, &[16, 17, 18]),
    (19, &[19]),
    (20, &[20]),
    (21, &[21, 22, 23]),
    // guitar
    (24, &[24]),
    (25, &[25]),
    (27, &[26, 27, 28]),
    (29, &[29, 30]),
    (31, &[31]),
    // bass
    (32, &[32]),
    (33, &[33, 34]),
    (35, &[35]),
    (36, &[36, 37]),
    (38, &[38, 39]),
    // strings
    (40, &[40]),
    (41, &[41]),
    (42, &[42]),
    (43, &[43]),
    (45, &[44, 45]),
    (46, &[46]),
    (47, &[47]),
    // ensemble
    (48, &[48, 49]),
    (50, &[50, 51]),
    (52, &[52, 53]),
    (54, &[54]),
    (55, &[55]),
    // brass
    (56, &[56, 59]),
    (57, &[57]),
    (58, &[58]),
    (60, &[60]),
    (61, &[61]),
    (62, &[62, 63]),
    // reed
    (64, &[64, 65]),
    (66, &[66]),
    (67, &[67]),
    (68, &[68, 69]),
    (70, &[70]),
    (71, &[71]),
    // pipe
    (72, &[72]),
    (73, &[73, 74]),
    (75, &[75]),
    (77, &[76, 77]),
    (79, &[78, 79]),
    // synth lead, pad, effects
    (80, &[80, 81, 82, 83, 84, 85, 86, 87]),
    (88, &[88, 89, 90, 91, 92, 93, 94, 95]),
    (96, &[96, 97, 98, 99, 100, 101, 102, 103]),
    // ethnic
    (104, &[104, 105, 106, 107]),
    (108, &[108, 109, 110, 111]),
    // percussive, sound effects
    (112, &[112, 113, 114, 115, 116, 117, 118, 119]),
    (120, &[120, 121, 122, 123, 124, 125, 126, 127]),
];

pub const NUM_CLASSES: usize = 61;
pub const DRUM_CLASS: usize = 60;

const fn build_class_table() -> [u8; 128] {
    let mut t = [u8::MAX; 128];
    let mut c = 0;
    while c < GROUPS.len() {
        let members = GROUPS[c].1;
        let mut k = 0;
        while k < members.len() {
            t[members[k] as usize] = c as u8;
            k += 1;
        }
        c += 1;
    }
    t
}

const CLASS_OF: [u8; 128] = build_class_table();

pub fn class_of(inst: Instrument) -> usize {
    if inst.is_drum {
        DRUM_CLASS
    } else {
        CLASS_OF[(inst.program & 0x7f) as usize] as usize
    }
}

pub fn representative(class: usize) -> Instrument {
    if class == DRUM_CLASS {
        Instrument::DRUMS
    } else {
        Instrument::program(GROUPS[class].0)
    }
}

pub fn class_name(class: usize) -> String {
    if class == DRUM_CLASS {
        "drums".into()
    } else {
        format!("p{}", GROUPS[class].0)
    }
}
