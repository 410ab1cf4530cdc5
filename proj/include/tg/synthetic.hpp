#pragma once

// Templated multi-sentence documents.  Each document draws a cast (three
// people, a city, a job, an object) and keeps reusing it, so most entity
// tokens are only predictable from earlier sentences.

#include <array>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace tg::synth {

struct Options {
  std::size_t target_words = 150000;
  std::size_t min_sentences = 8;
  std::size_t max_sentences = 16;
  std::uint64_t seed = 7;
};

inline constexpr std::array<std::string_view, 116> kPeople = {"Alice", "Bruno", "Clara", "Daniel", "Elena", "Felix", "Grace", "Hugo", "Irene", "Jonas", "Karla", "Leon", "Maria", "Nikolai", "Olga", "Pablo", "Quinn", "Rosa", "Samuel", "Tessa", "Umar", "Vera", "Walter", "Xenia", "Yusuf", "Zora", "Arthur", "Bianca", "Cyrus", "Diana", "Edgar", "Fiona", "Gustav", "Helena", "Isaac", "Julia", "Kevin", "Lena", "Marco", "Nora", "Oscar", "Paula", "Rafael", "Sofia", "Tobias", "Ursula", "Victor", "Wendy", "Anton", "Beatrix", "Carlos", "Dora", "Emil", "Frida", "Gregor", "Hanna", "Ivan", "Jana", "Kasper", "Lucia", "Matteo", "Nadia", "Otto", "Petra", "Ruben", "Selma", "Tomas", "Una", "Vincent", "Wilma", "Yara", "Zeno", "Agnes", "Boris", "Celia", "Dmitri", "Esther", "Fabian", "Gloria", "Henrik", "Ingrid", "Jasper", "Kira", "Lorenz", "Mila", "Nils", "Ophelia", "Pedro", "Rita", "Stefan", "Thea", "Ulrich", "Valeria", "Wolfgang", "Ada", "Bernard", "Carmen", "Dario", "Elsa", "Fritz", "Gemma", "Harald", "Iris", "Joel", "Klara", "Luis", "Magda", "Noah", "Orla", "Piotr", "Renata", "Sven", "Tilda", "Uwe", "Viola", "Xavier"};

inline constexpr std::array<std::string_view, 60> kCities = {"Paris", "Lisbon", "Vienna", "Oslo", "Prague", "Dublin", "Madrid", "Berlin", "Athens", "Warsaw", "Zurich", "Helsinki", "Milan", "Porto", "Krakow", "Geneva", "Lyon", "Munich", "Seville", "Bergen", "Toledo", "Bruges", "Riga", "Sofia", "Naples", "Turin", "Malaga", "Graz", "Basel", "Ghent", "Tallinn", "Vilnius", "Split", "Bari", "Cork", "Nantes", "Bremen", "Dresden", "Leipzig", "Bologna", "Verona", "Florence", "Cadiz", "Bilbao", "Antwerp", "Utrecht", "Leiden", "Aarhus", "Odense", "Malmo", "Tampere", "Turku", "Gdansk", "Poznan", "Brno", "Linz", "Salzburg", "Lucerne", "Nice", "Rouen"};

inline constexpr std::array<std::string_view, 40> kJobs = {"baker", "painter", "doctor", "teacher", "farmer", "sailor", "builder", "tailor", "poet", "miner", "lawyer", "singer", "weaver", "pilot", "potter", "gardener", "jeweler", "butcher", "printer", "carpenter", "fisher", "hunter", "banker", "barber", "brewer", "cook", "dancer", "driver", "editor", "glazier", "guard", "judge", "mason", "merchant", "nurse", "pianist", "priest", "scholar", "smith", "soldier"};

inline constexpr std::array<std::string_view, 40> kObjects = {"lantern", "violin", "map", "compass", "basket", "hammer", "kettle", "ladder", "mirror", "saddle", "bell", "clock", "anchor", "candle", "shovel", "drum", "scarf", "teapot", "banner", "barrel", "blanket", "bottle", "bucket", "carpet", "chair", "coin", "cradle", "feather", "flute", "goblet", "helmet", "jacket", "key", "ladle", "locket", "mask", "needle", "quilt", "ribbon", "sword"};

namespace detail {

struct Cast {
  std::string_view person, friend_, other, city, job, object;
};

inline std::string fill(std::string_view tpl, const Cast& c) {
  std::string out;
  for (std::size_t i = 0; i < tpl.size(); ++i) {
    if (tpl[i] == '{' && i + 2 < tpl.size() && tpl[i + 2] == '}') {
      switch (tpl[i + 1]) {
        case 'P': out += c.person; break;
        case 'F': out += c.friend_; break;
        case 'G': out += c.other; break;
        case 'C': out += c.city; break;
        case 'J': out += c.job; break;
        case 'O': out += c.object; break;
        default: out += tpl.substr(i, 3);
      }
      i += 2;
    } else {
      out += tpl[i];
    }
  }
  return out;
}

inline std::size_t word_count(std::string_view s) {
  std::size_t n = 0;
  bool in = false;
  for (char ch : s) {
    const bool sp = ch == ' ';
    if (!sp && !in) ++n;
    in = !sp;
  }
  return n;
}

}  // namespace detail

inline constexpr std::array<std::string_view, 4> kOpeners = {
    "{P} was born in {C}.",
    "{P} grew up in {C} with {F}.",
    "Long ago, {P} lived in {C}.",
    "{P} and {G} came from {C}.",
};

inline constexpr std::array<std::string_view, 24> kBody = {
    "{P} worked as a {J} in {C}.",
    "{P} met {F} and {G}.",
    "{F} gave the {O} to {P}.",
    "{G} saw {P} in {C}.",
    "The {J} {P} sold the {O}.",
    "{P} lost the {O} in {C}.",
    "{F} visited {P} and {G}.",
    "The son of {P} is {F}.",
    "{G} found the {O}.",
    "{P} returned to {C}.",
    "The {O} belonged to {P}.",
    "{F} called {P} a good {J}.",
    "{G} thanked {F}.",
    "{P} left {C} with {G}.",
    "{F} hid the {O} from {G}.",
    "Every {J} in {C} knew {P}.",
    "{G} was the friend of {F}.",
    "{P} missed {F} in {C}.",
    "{G} painted the {O}.",
    "The {J} from {C} helped {G}.",
    "{F} and {P} repaired the {O}.",
    "{P} wrote to {G} from {C}.",
    "It rained in {C}.",
    "The {O} was old.",
};

/// Corpus text in heading-delimited form: " = Story k = " lines, each followed
/// by a single paragraph of sentences.
inline std::string synthetic_corpus(const Options& o) {
  std::mt19937_64 rng(o.seed);
  auto pick = [&](std::size_t n) { return static_cast<std::size_t>(rng() % n); };
  std::ostringstream out;
  std::size_t words = 0;
  for (std::size_t doc = 1; words < o.target_words; ++doc) {
    detail::Cast c;
    c.person = kPeople[pick(kPeople.size())];
    do {
      c.friend_ = kPeople[pick(kPeople.size())];
    } while (c.friend_ == c.person);
    do {
      c.other = kPeople[pick(kPeople.size())];
    } while (c.other == c.person || c.other == c.friend_);
    c.city = kCities[pick(kCities.size())];
    c.job = kJobs[pick(kJobs.size())];
    c.object = kObjects[pick(kObjects.size())];
    const std::size_t n = o.min_sentences + pick(o.max_sentences - o.min_sentences + 1);
    std::string para = detail::fill(kOpeners[pick(kOpeners.size())], c);
    for (std::size_t i = 1; i < n; ++i) para += " " + detail::fill(kBody[pick(kBody.size())], c);
    words += detail::word_count(para);
    out << " = Story " << doc << " = \n\n" << para << "\n\n";
  }
  return out.str();
}

}  // namespace tg::synth
