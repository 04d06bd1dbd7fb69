#include "cgc/corpus.hpp"

#include <array>
#include <fstream>
#include <sstream>

#include "cgc/error.hpp"
#include "cgc/hash.hpp"
#include "cgc/rng.hpp"

namespace cgc::corpus {

std::vector<int> tokenize(std::string_view text) {
  std::vector<int> out(text.size());
  for (std::size_t i = 0; i < text.size(); ++i) out[i] = static_cast<unsigned char>(text[i]);
  return out;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArtifactError("cannot open corpus " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::uint64_t fingerprint(std::span<const int> tokens) {
  Fnv1a h;
  for (int t : tokens) h.update_pod(static_cast<std::uint8_t>(t));
  h.update_pod(static_cast<std::uint64_t>(tokens.size()));
  return h.digest();
}

Layout layout(std::size_t n_tokens, int n_shards, double holdout_fraction) {
  if (n_shards < 1) throw InvalidArgument("need at least one shard");
  if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0)) throw InvalidArgument("holdout_fraction must be in (0,1)");
  Layout out;
  const std::size_t shard = n_tokens / static_cast<std::size_t>(n_shards);
  for (int s = 0; s < n_shards; ++s) {
    const std::size_t b = static_cast<std::size_t>(s) * shard;
    const std::size_t e = (s + 1 == n_shards) ? n_tokens : b + shard;
    const auto held = static_cast<std::size_t>(static_cast<double>(e - b) * holdout_fraction);
    out.train.emplace_back(b, e - held);
    out.heldout.emplace_back(e - held, e);
  }
  return out;
}

std::vector<int> gather(std::span<const int> tokens, const std::vector<Region>& regions) {
  std::vector<int> out;
  for (const auto& [b, e] : regions) {
    if (e > tokens.size() || b > e) throw InvalidArgument("region out of bounds");
    out.insert(out.end(), tokens.begin() + static_cast<std::ptrdiff_t>(b), tokens.begin() + static_cast<std::ptrdiff_t>(e));
  }
  return out;
}

namespace {

template <std::size_t N>
const char* pick(Rng& rng, const std::array<const char*, N>& words) {
  return words[rng.below(N)];
}

constexpr std::array<const char*, 16> kAdjectives{"old", "quiet", "young", "tired", "clever", "small", "bright", "patient",
                                                  "careful", "restless", "gentle", "proud", "lonely", "curious", "brave", "silent"};
constexpr std::array<const char*, 16> kPeople{"fisherman", "teacher", "merchant", "doctor", "child", "baker", "soldier", "painter",
                                              "farmer", "sailor", "widow", "student", "traveler", "priest", "miner", "weaver"};
constexpr std::array<const char*, 16> kVerbs{"carried", "found", "watched", "repaired", "sold", "painted", "buried", "opened",
                                             "followed", "remembered", "counted", "lost", "cleaned", "measured", "hid", "borrowed"};
constexpr std::array<const char*, 16> kObjects{"lantern", "letter", "basket", "map", "coin", "boat", "garden", "window",
                                               "rope", "book", "candle", "bridge", "clock", "knife", "blanket", "ladder"};
constexpr std::array<const char*, 12> kPlaces{"harbor", "village", "market", "forest", "river", "church", "valley", "station",
                                              "school", "mountain", "kitchen", "library"};
constexpr std::array<const char*, 10> kTimes{"before dawn", "at noon", "after the storm", "in the evening", "during the winter",
                                             "on Sunday", "at midnight", "in the spring", "after supper", "before the rain"};
constexpr std::array<const char*, 8> kConnectors{"Later", "Meanwhile", "Afterwards", "Still", "Then", "Soon", "Once again", "Quietly"};

constexpr std::array<const char*, 16> kNouns{"items", "values", "counts", "scores", "rows", "names", "nodes", "weights",
                                             "prices", "tokens", "events", "points", "lines", "keys", "blocks", "samples"};
constexpr std::array<const char*, 12> kActions{"scale", "filter", "merge", "sort", "count", "clip", "shift", "reverse",
                                               "split", "pack", "sum", "check"};
constexpr std::array<const char*, 6> kOps{"+", "-", "*", "//", "%", "max"};

constexpr std::array<const char*, 16> kFirst{"Alice", "Bruno", "Chen", "Dara", "Emil", "Farah", "Goran", "Hana",
                                             "Ivan", "Jonas", "Kira", "Luis", "Mona", "Nils", "Olga", "Pavel"};
constexpr std::array<const char*, 16> kLast{"Moreau", "Silva", "Novak", "Okafor", "Berg", "Tanaka", "Ruiz", "Kowalski",
                                            "Haddad", "Larsen", "Rossi", "Weber", "Costa", "Ivanova", "Nagy", "Park"};
constexpr std::array<const char*, 12> kCities{"Lisbon", "Prague", "Oslo", "Lagos", "Kyoto", "Quito", "Tunis", "Perth",
                                              "Dublin", "Riga", "Porto", "Seoul"};
constexpr std::array<const char*, 12> kRoles{"engineer", "nurse", "clerk", "pilot", "chemist", "editor", "driver", "analyst",
                                             "cook", "architect", "librarian", "mechanic"};


void prose(Rng& rng, std::string& out) {
  std::string s = "The ";
  s += pick(rng, kAdjectives);
  s += ' ';
  s += pick(rng, kPeople);
  s += ' ';
  s += pick(rng, kVerbs);
  s += " a ";
  if (rng.below(2)) {
    s += pick(rng, kAdjectives);
    s += ' ';
  }
  s += pick(rng, kObjects);
  s += " near the ";
  s += pick(rng, kPlaces);
  if (rng.below(2)) {
    s += ' ';
    s += pick(rng, kTimes);
  }
  s += '.';
  if (rng.below(3) == 0) {
    s += ' ';
    s += pick(rng, kConnectors);
    s += " the ";
    s += pick(rng, kPeople);
    s += ' ';
    s += pick(rng, kVerbs);
    s += " it again.";
  }
  out += s;
  out += rng.below(5) == 0 ? "\n\n" : " ";
}

void arithmetic(Rng& rng, std::string& out) {
  const long a = static_cast<long>(rng.below(100));
  const long b = static_cast<long>(rng.below(99)) + 1;
  switch (rng.below(5)) {
    case 0: out += std::to_string(a) + " + " + std::to_string(b) + " = " + std::to_string(a + b) + ".\n"; break;
    case 1: out += std::to_string(a) + " - " + std::to_string(b) + " = " + std::to_string(a - b) + ".\n"; break;
    case 2: {
      const long x = a % 13;
      const long y = b % 13;
      out += std::to_string(x) + " * " + std::to_string(y) + " = " + std::to_string(x * y) + ".\n";
      break;
    }
    case 3: {
      const long y = b % 12 + 1;
      const long x = y * (a % 12 + 1);
      out += std::to_string(x) + " / " + std::to_string(y) + " = " + std::to_string(x / y) + ".\n";
      break;
    }
    default:
      out += "The sum of " + std::to_string(a % 20) + " and " + std::to_string(b % 20) + " is " +
             std::to_string(a % 20 + b % 20) + ".\n";
  }
}

void code(Rng& rng, std::string& out) {
  const std::string noun = pick(rng, kNouns);
  const std::string action = pick(rng, kActions);
  const std::string op = pick(rng, kOps);
  const int k = static_cast<int>(rng.below(9)) + 1;
  out += "def " + action + "_" + noun + "(" + noun + ", k=" + std::to_string(k) + "):\n";
  out += "    result = []\n";
  out += "    for x in " + noun + ":\n";
  if (rng.below(2)) out += "        if x > " + std::to_string(rng.below(50)) + ":\n    ";
  if (op == "max") {
    out += "        result.append(max(x, k))\n";
  } else {
    out += "        result.append(x " + op + " k)\n";
  }
  out += "    return result\n\n";
}

void record(Rng& rng, std::string& out) {
  const int age = 20 + static_cast<int>(rng.below(50));
  out += "name: ";
  out += pick(rng, kFirst);
  out += ' ';
  out += pick(rng, kLast);
  out += "; age: " + std::to_string(age) + "; city: ";
  out += pick(rng, kCities);
  out += "; role: ";
  out += pick(rng, kRoles);
  out += "; id: " + std::to_string(1000 + rng.below(9000)) + "\n";
}

}  // namespace

std::string generate(std::size_t bytes, std::uint64_t seed) {
  std::string out;
  out.reserve(bytes + 256);
  const std::size_t section = bytes / 4;
  using Gen = void (*)(Rng&, std::string&);
  const std::array<Gen, 4> gens{prose, arithmetic, code, record};
  for (std::size_t s = 0; s < gens.size(); ++s) {
    Rng rng(derive_seed(seed, s));
    const std::size_t target = (s + 1 == gens.size()) ? bytes : (s + 1) * section;
    std::string piece;
    while (out.size() + piece.size() < target) gens[s](rng, piece);
    piece.resize(target - out.size());
    out += piece;
  }
  return out;
}

}  // namespace cgc::corpus
