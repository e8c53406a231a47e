"""Frame templates for the two synthetic parsing tasks.

A frame sampler returns a list of phrases plus its semantics. Each phrase is
a list of ``(token, slot)`` pairs where ``slot`` indexes the frame's slot list
(or is None). Target languages reorder whole phrases, so a phrase is the unit
that stays contiguous across languages.
"""
from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

Phrase = List[Tuple[str, Optional[int]]]

CITIES = ["boston", "denver", "atlanta", "dallas", "seattle", "chicago", "miami", "phoenix",
          "houston", "detroit", "orlando", "newark"]
AIRPORT_CODES = ["BOS", "DEN", "ATL", "DFW", "SEA", "ORD", "MIA", "PHX", "IAH", "DTW", "MCO", "EWR"]
AIRPORT_NAMES = ["logan", "stapleton", "hartsfield", "lovefield", "tacoma", "ohare", "dade",
                 "skyharbor", "bush", "wayne", "herndon", "liberty"]
AIRLINES = ["united", "american", "delta", "southwest", "alaska", "jetblue"]
PEOPLE = ["john", "mary", "alex", "priya", "omar", "lucia", "chen", "sofia", "ivan", "amara"]
SCHOOLS = ["yale", "harvard", "stanford", "oxford", "mit", "princeton"]
COMPANIES = ["google", "acme", "siemens", "nokia", "tesla", "airbus"]
ARTISTS = ["adele", "drake", "shakira", "beyonce", "coldplay", "queen"]
TIMES = ["6am", "7am", "8am", "9am", "noon", "5pm", "10pm"]

ENTITY_TOKENS = frozenset(
    CITIES + AIRPORT_CODES + AIRPORT_NAMES + AIRLINES + PEOPLE + SCHOOLS + COMPANIES + ARTISTS
    + TIMES
)

DAYS = ["monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday"]
PERIODS = ["morning", "afternoon", "evening", "night"]
DATES = [["today"], ["tomorrow"], ["tonight"], ["this", "weekend"], ["next", "week"]] + [
    ["on", d] for d in DAYS
]
MESSAGES = [["i", "am", "late"], ["call", "me", "back"], ["see", "you", "soon"],
            ["happy", "birthday"], ["dinner", "is", "ready"], ["good", "luck"]]
TODOS = [["buy", "milk"], ["call", "mom"], ["pay", "rent"], ["walk", "the", "dog"],
         ["water", "the", "plants"], ["book", "a", "table"]]
GENRES = ["jazz", "rock", "classical", "pop", "country"]


@dataclass
class TreeFrame:
    intent: str
    slots: List[str]
    phrases: List[Phrase]


@dataclass
class SqlFrame:
    select: str
    table: str
    # (column, literal) in canonical order
    where: List[Tuple[str, str]]
    phrases: List[Phrase]
    labels: List[str] = field(default_factory=list)


def _words(tokens, slot=None) -> Phrase:
    return [(t, slot) for t in tokens]


def _maybe(rng: random.Random, p: float) -> bool:
    return rng.random() < p


def _shuffle_tail(rng: random.Random, phrases: List[Phrase], p: float) -> List[Phrase]:
    # English surface variety: permute the modifier phrases after the intro
    if len(phrases) > 2 and _maybe(rng, p):
        head, tail = phrases[:1], phrases[1:]
        rng.shuffle(tail)
        return head + tail
    return phrases


# ---------------------------------------------------------------------------
# tree task (intent / slot trees)


def _weather(rng):
    slots, phrases = [], [_words(rng.choice([["what", "is", "the", "weather"],
                                             ["how", "is", "the", "weather"],
                                             ["weather", "forecast"], ["will", "it", "rain"]]))]
    if _maybe(rng, 0.75):
        slots.append("SL:LOCATION")
        phrases.append([("in", None), (rng.choice(CITIES), len(slots) - 1)])
    if _maybe(rng, 0.7) or len(slots) == 0:
        slots.append("SL:DATE_TIME")
        phrases.append(_words(rng.choice(DATES), len(slots) - 1))
    return TreeFrame("IN:GET_WEATHER", slots, phrases)


def _alarm(rng):
    slots = ["SL:DATE_TIME"]
    phrases = [_words(rng.choice([["set", "an", "alarm"], ["wake", "me", "up"],
                                  ["create", "an", "alarm"]])),
               [(rng.choice(["for", "at"]), None), (rng.choice(TIMES), 0)]]
    if _maybe(rng, 0.5):
        slots.append("SL:DATE_TIME")
        phrases.append(_words(rng.choice(DATES), 1))
    return TreeFrame("IN:CREATE_ALARM", slots, phrases)


def _message(rng):
    slots = ["SL:RECIPIENT", "SL:CONTENT_EXACT"]
    phrases = [_words(rng.choice([["send", "a", "message", "to"], ["text"], ["message"]])),
               [(rng.choice(PEOPLE), 0)],
               [(rng.choice(["saying", "that"]), None)] + _words(rng.choice(MESSAGES), 1)]
    return TreeFrame("IN:SEND_MESSAGE", slots, phrases)


def _contact(rng):
    if _maybe(rng, 0.5):
        phrases = [_words(rng.choice([["who", "attended"], ["who", "went", "to"],
                                      ["who", "studied", "at"]])),
                   [(rng.choice(SCHOOLS), 0)]]
        return TreeFrame("IN:GET_CONTACT", ["SL:SCHOOL"], phrases)
    phrases = [_words(rng.choice([["who", "works", "at"], ["who", "is", "employed", "by"]])),
               [(rng.choice(COMPANIES), 0)]]
    return TreeFrame("IN:GET_CONTACT", ["SL:EMPLOYER"], phrases)


def _call(rng):
    phrases = [_words(rng.choice([["call"], ["phone"], ["ring"], ["start", "a", "call", "with"]])),
               [(rng.choice(PEOPLE), 0)]]
    if _maybe(rng, 0.3):
        phrases.append(_words(["right", "now"]))
    return TreeFrame("IN:CREATE_CALL", ["SL:CONTACT"], phrases)


def _music(rng):
    slots, phrases = [], [_words(rng.choice([["play"], ["put", "on"], ["i", "want", "to", "hear"]]))]
    if _maybe(rng, 0.6):
        slots.append("SL:MUSIC_GENRE")
        phrases.append([(rng.choice(GENRES), 0), (rng.choice(["music", "songs"]), None)])
    else:
        phrases.append(_words([rng.choice(["music", "songs"])]))
    if _maybe(rng, 0.6) or not slots:
        slots.append("SL:MUSIC_ARTIST_NAME")
        phrases.append([("by", None), (rng.choice(ARTISTS), len(slots) - 1)])
    return TreeFrame("IN:PLAY_MUSIC", slots, phrases)


def _reminder(rng):
    slots = ["SL:PERSON_REMINDED", "SL:TODO"]
    phrases = [[("remind", None), ("me", 0)], [("to", None)] + _words(rng.choice(TODOS), 1)]
    if _maybe(rng, 0.6):
        slots.append("SL:DATE_TIME")
        phrases.append(_words(rng.choice(DATES), 2))
    return TreeFrame("IN:CREATE_REMINDER", slots, phrases)


def _event(rng):
    slots = ["SL:LOCATION"]
    phrases = [_words(rng.choice([["what", "events", "are", "happening"],
                                  ["any", "concerts"], ["things", "to", "do"]])),
               [("in", None), (rng.choice(CITIES), 0)]]
    if _maybe(rng, 0.6):
        slots.append("SL:DATE_TIME")
        phrases.append(_words(rng.choice(DATES), 1))
    return TreeFrame("IN:GET_EVENT", slots, phrases)


TREE_SAMPLERS = {
    "IN:GET_WEATHER": _weather,
    "IN:CREATE_ALARM": _alarm,
    "IN:SEND_MESSAGE": _message,
    "IN:GET_CONTACT": _contact,
    "IN:CREATE_CALL": _call,
    "IN:PLAY_MUSIC": _music,
    "IN:CREATE_REMINDER": _reminder,
    "IN:GET_EVENT": _event,
}


def sample_tree_frame(rng: random.Random, intents=None) -> TreeFrame:
    names = sorted(intents or TREE_SAMPLERS)
    frame = TREE_SAMPLERS[rng.choice(names)](rng)
    frame.phrases = _shuffle_tail(rng, frame.phrases, 0.2)
    return frame


# ---------------------------------------------------------------------------
# sql task (ATIS-style flight database)

SQL_COLUMN_ORDER = ["code", "from_city", "to_city", "day", "period", "airline", "class"]


def _route(rng):
    a, b = rng.sample(CITIES, 2)
    return a, b, [[("from", None), (a, 0)], [("to", None), (b, 1)]]


def _with_slot(phrase: Phrase, slot: int) -> Phrase:
    return [(t, slot if s == 0 else s) for t, s in phrase]


def _sql_flights(rng):
    a, b, route = _route(rng)
    where = [("from_city", a), ("to_city", b)]
    phrases = [_words(rng.choice([["show", "me", "flights"], ["list", "flights"],
                                  ["i", "need", "a", "flight"], ["find", "flights"]]))] + route
    if _maybe(rng, 0.4):
        d = rng.choice(DAYS)
        where.append(("day", d))
        phrases.append([("on", None), (d, len(where) - 1)])
    if _maybe(rng, 0.35):
        p = rng.choice(PERIODS)
        where.append(("period", p))
        phrases.append([("in", None), ("the", None), (p, len(where) - 1)])
    if _maybe(rng, 0.3):
        al = rng.choice(AIRLINES)
        where.append(("airline", al))
        phrases.append([("on", None), (al, len(where) - 1)])
    return SqlFrame("flight_id", "flight", where, phrases)


def _sql_earliest(rng):
    a, b, route = _route(rng)
    where = [("from_city", a), ("to_city", b), ("period", "morning")]
    phrases = [_words(rng.choice([["show", "the", "earliest", "flight"],
                                  ["what", "is", "the", "earliest", "flight"]]))] + route
    if _maybe(rng, 0.4):
        d = rng.choice(DAYS)
        where.append(("day", d))
        phrases.append([("on", None), (d, 3)])
    return SqlFrame("flight_id", "flight", where, phrases)


def _sql_airlines(rng):
    a, b, route = _route(rng)
    where = [("from_city", a), ("to_city", b)]
    phrases = [_words(rng.choice([["which", "airlines", "fly"], ["what", "airlines", "go"]]))] + route
    if _maybe(rng, 0.4):
        d = rng.choice(DAYS)
        where.append(("day", d))
        phrases.append([("on", None), (d, 2)])
    return SqlFrame("airline", "flight", where, phrases)


def _sql_days(rng):
    a, b, route = _route(rng)
    al = rng.choice(AIRLINES)
    where = [("from_city", a), ("to_city", b), ("airline", al)]
    phrases = [_words(["on", "which", "days", "does"]), [(al, 2)], _words(["fly"])] + route
    return SqlFrame("day", "flight", where, phrases)


def _sql_fare(rng):
    a, b, route = _route(rng)
    cls, words = rng.choice([("economy", ["cheapest"]), ("first", ["first", "class"]),
                             ("business", ["business", "class"])])
    where = [("from_city", a), ("to_city", b), ("class", cls)]
    intro = rng.choice([["show", "the"], ["what", "is", "the"]])
    phrases = [_words(intro) + _words(words, 2) + [("fare", None)]] + route
    return SqlFrame("amount", "fare", where, phrases)


def _sql_airport(rng):
    i = rng.randrange(len(AIRPORT_CODES))
    code = AIRPORT_CODES[i]
    if _maybe(rng, 0.5):
        phrases = [_words(rng.choice([["what", "does"], ["what", "is", "the", "name", "of"]])),
                   [(code, 0)], _words(["mean"] if _maybe(rng, 0.5) else ["airport"])]
        return SqlFrame("name", "airport", [("code", code)], phrases)
    phrases = [_words(rng.choice([["which", "city", "is"], ["where", "is"]])), [(code, 0)],
               _words(["located"])]
    return SqlFrame("city", "airport", [("code", code)], phrases)


SQL_SAMPLERS = {
    "flights": _sql_flights,
    "earliest": _sql_earliest,
    "airlines": _sql_airlines,
    "days": _sql_days,
    "fare": _sql_fare,
    "airport": _sql_airport,
}


def sample_sql_frame(rng: random.Random, intents=None) -> SqlFrame:
    names = sorted(intents or SQL_SAMPLERS)
    frame = SQL_SAMPLERS[rng.choice(names)](rng)
    frame.phrases = _shuffle_tail(rng, frame.phrases, 0.25)
    order = {c: i for i, c in enumerate(SQL_COLUMN_ORDER)}
    frame.where = sorted(frame.where, key=lambda cv: order[cv[0]])
    frame.labels = [f"SELECT:{frame.table}.{frame.select}"] + [f"WHERE:{c}" for c, _ in frame.where]
    return frame


def sql_lf(frame: SqlFrame) -> str:
    lf = f"SELECT {frame.select} FROM {frame.table}"
    if frame.where:
        lf += " WHERE " + " AND ".join(f"{c} = {v}" for c, v in frame.where)
    return lf


def build_flight_database(seed: int) -> Dict[str, dict]:
    """Tables backing the sql task, as plain JSON-able dicts."""
    rng = random.Random(seed)
    flights = []
    fid = 100
    for a in CITIES:
        for b in CITIES:
            if a == b:
                continue
            for _ in range(rng.randint(2, 5)):
                flights.append([fid, a, b, rng.choice(DAYS), rng.choice(PERIODS), rng.choice(AIRLINES)])
                fid += 1
    fares = []
    for a in CITIES:
        for b in CITIES:
            if a != b:
                base = rng.randint(80, 400)
                fares.append([a, b, "economy", base])
                fares.append([a, b, "business", base * 3])
                fares.append([a, b, "first", base * 5])
    return {
        "flight": {"columns": ["flight_id", "from_city", "to_city", "day", "period", "airline"],
                   "rows": flights},
        "fare": {"columns": ["from_city", "to_city", "class", "amount"], "rows": fares},
        "airport": {"columns": ["code", "name", "city"],
                    "rows": [list(r) for r in zip(AIRPORT_CODES, AIRPORT_NAMES, CITIES)]},
        "airline": {"columns": ["name"], "rows": [[a] for a in AIRLINES]},
    }
