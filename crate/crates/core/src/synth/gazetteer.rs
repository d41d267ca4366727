//! Two-token name gazetteer: every given name paired with every surname.

const GIVEN: &[&str] = &[
    "Aaron",
    "Abigail",
    "Adam",
    "Adrian",
    "Agnes",
    "Alan",
    "Albert",
    "Alice",
    "Amara",
    "Amelia",
    "Andre",
    "Angela",
    "Anna",
    "Arthur",
    "Astrid",
    "Barack",
    "Beatrice",
    "Benjamin",
    "Bernard",
    "Bianca",
    "Boris",
    "Bruno",
    "Camille",
    "Carlos",
    "Carmen",
    "Cecilia",
    "Charles",
    "Chloe",
    "Clara",
    "Connor",
    "Daniel",
    "Daphne",
    "David",
    "Diana",
    "Dmitri",
    "Dolores",
    "Edgar",
    "Edith",
    "Elena",
    "Elias",
    "Eliza",
    "Emil",
    "Emma",
    "Enzo",
    "Erik",
    "Esther",
    "Felix",
    "Fiona",
    "Florence",
    "Frank",
    "Gabriel",
    "Grace",
    "Gregory",
    "Hana",
    "Harold",
    "Harriet",
    "Hector",
    "Helen",
    "Henry",
    "Hugo",
    "Ian",
    "Ingrid",
    "Irene",
    "Isaac",
    "Ivan",
    "Jacob",
    "James",
    "Jasmine",
    "Joan",
    "Jonas",
    "Julia",
    "Julian",
    "Karen",
    "Karl",
    "Keiko",
    "Laura",
    "Leo",
    "Lena",
    "Lucas",
    "Lucia",
    "Magnus",
    "Marco",
    "Margaret",
    "Maria",
    "Martin",
    "Maya",
    "Miguel",
    "Miriam",
    "Nadia",
    "Nathan",
    "Nina",
    "Noah",
    "Nora",
    "Olga",
    "Oliver",
    "Omar",
    "Oscar",
    "Pablo",
    "Paula",
    "Peter",
    "Priya",
    "Quentin",
    "Rachel",
    "Rafael",
    "Rebecca",
    "Robert",
    "Rosa",
    "Ruth",
    "Samuel",
    "Sara",
    "Sebastian",
    "Simone",
    "Sofia",
    "Stefan",
    "Susan",
    "Tara",
    "Theo",
    "Thomas",
    "Ursula",
    "Valentina",
    "Victor",
    "Vivian",
    "Walter",
    "Wendy",
    "William",
    "Xavier",
    "Yara",
    "Yusuf",
    "Zara",
    "Zoe",
    "Aiden",
    "Brenda",
    "Cyrus",
];

const FAMILY: &[&str] = &[
    "Abbott",
    "Adler",
    "Alvarez",
    "Andersen",
    "Archer",
    "Baker",
    "Banerjee",
    "Barnes",
    "Becker",
    "Bell",
    "Berg",
    "Bishop",
    "Blake",
    "Brandt",
    "Brooks",
    "Campbell",
    "Carter",
    "Castillo",
    "Chen",
    "Clarke",
    "Cohen",
    "Cole",
    "Cooper",
    "Costa",
    "Cruz",
    "Dalton",
    "Davies",
    "Dixon",
    "Dubois",
    "Duncan",
    "Edwards",
    "Ellis",
    "Evans",
    "Fischer",
    "Fleming",
    "Fletcher",
    "Ford",
    "Foster",
    "Garcia",
    "Gardner",
    "Gomez",
    "Grant",
    "Gray",
    "Hansen",
    "Harper",
    "Hayes",
    "Hoffman",
    "Holland",
    "Howard",
    "Hughes",
    "Ibrahim",
    "Ivanova",
    "Jackson",
    "Jensen",
    "Johnson",
    "Kane",
    "Keller",
    "Khan",
    "Kim",
    "Klein",
    "Kowalski",
    "Lambert",
    "Larsen",
    "Lee",
    "Lopez",
    "Mackay",
    "Marsh",
    "Martinez",
    "Mason",
    "Meyer",
    "Miller",
    "Moreau",
    "Morgan",
    "Murphy",
    "Nakamura",
    "Nash",
    "Nguyen",
    "Novak",
    "Obama",
    "Okafor",
    "Olsen",
    "Ortiz",
    "Owens",
    "Palmer",
    "Park",
    "Patel",
    "Perez",
    "Peters",
    "Porter",
    "Quinn",
    "Ramos",
    "Reed",
    "Reyes",
    "Richter",
    "Rivera",
    "Roberts",
    "Rossi",
    "Russo",
    "Sato",
    "Schmidt",
    "Schultz",
    "Shaw",
    "Silva",
    "Singh",
    "Sokolov",
    "Stewart",
    "Sullivan",
    "Tanaka",
    "Taylor",
    "Thompson",
    "Torres",
    "Turner",
    "Varga",
    "Vogel",
    "Wagner",
    "Walsh",
    "Ward",
    "Watson",
    "Weber",
    "Wells",
    "West",
    "Wilson",
    "Wolf",
    "Wright",
    "Yamamoto",
    "Young",
    "Zhang",
    "Ziegler",
    "Zimmer",
    "Bauer",
    "Kruger",
    "Lindqvist",
    "Moretti",
    "Petrov",
];

pub fn size() -> usize {
    GIVEN.len() * FAMILY.len()
}

pub fn entry(i: usize) -> String {
    format!("{} {}", GIVEN[i / FAMILY.len()], FAMILY[i % FAMILY.len()])
}

/// Six entries in 64, scattered by a multiplicative hash, are reserved for
/// evaluation.
pub fn is_held_out(i: usize) -> bool {
    (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 58 < 6
}
