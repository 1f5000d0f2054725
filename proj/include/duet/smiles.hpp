#pragma once

#include <algorithm>
#include <cctype>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "duet/error.hpp"
#include "duet/tokenizer.hpp"

// SMILES subset parser used for validity checking and descriptor labeling.
// The accepted grammar is documented in docs/smiles_grammar.md; stereo
// markers are parsed but carry no semantics.

namespace duet {

struct Atom {
  std::string symbol;    // element symbol, capitalized ("C", "Cl", ...)
  bool aromatic = false; // written lowercase
  bool bracket = false;
  int charge = 0;
  int explicit_h = 0;    // bracket H count
  int isotope = 0;
  double bond_sum = 0.0; // aromatic bonds count 1
};

struct Bond {
  int a = 0;
  int b = 0;
  int order = 1;         // 1, 2, 3; aromatic/stereo singles are 1
};

struct ParsedMolecule {
  std::vector<Atom> atoms;
  std::vector<Bond> bonds;
  int ring_pair_count = 0;
  int branch_count = 0;
  int token_count = 0;

  int heavy_atom_count() const {
    int n = 0;
    for (const auto& a : atoms)
      if (a.symbol != "H") ++n;
    return n;
  }
};

struct ValidityReport {
  bool valid = false;
  std::string error;
};

namespace smiles_detail {

struct ElementInfo {
  int max_valence;               // 0 = no valence check for this element
  std::vector<int> valences;     // allowed valences for implicit H inference
};

inline const std::map<std::string, ElementInfo>& element_table() {
  static const std::map<std::string, ElementInfo> table = {
      {"H", {1, {1}}},
      {"B", {3, {3}}},
      {"C", {4, {4}}},
      {"N", {5, {3, 5}}},
      {"O", {2, {2}}},
      {"F", {1, {1}}},
      {"P", {5, {3, 5}}},
      {"S", {6, {2, 4, 6}}},
      {"Cl", {1, {1}}},
      {"Br", {1, {1}}},
      {"I", {1, {1}}},
      // Bracket-only elements; valence is not checked for these.
      {"Li", {0, {}}},
      {"Na", {0, {}}},
      {"K", {0, {}}},
      {"Mg", {0, {}}},
      {"Ca", {0, {}}},
      {"Al", {0, {}}},
      {"Si", {0, {}}},
      {"Fe", {0, {}}},
      {"Zn", {0, {}}},
      {"Se", {0, {}}},
      {"As", {0, {}}},
  };
  return table;
}

inline bool is_organic_subset(const std::string& symbol) {
  static const std::vector<std::string> organic = {"B", "C", "N", "O", "P",
                                                   "S", "F", "Cl", "Br", "I"};
  return std::find(organic.begin(), organic.end(), symbol) != organic.end();
}

inline bool is_aromatic_symbol(char c) {
  return c == 'b' || c == 'c' || c == 'n' || c == 'o' || c == 's' || c == 'p';
}

inline int bond_order(char symbol) {
  switch (symbol) {
    case '-': return 1;
    case '=': return 2;
    case '#': return 3;
    case ':': return 1;   // aromatic bond counts 1 toward the valence cap
    case '/': return 1;   // stereo singles, parsed but not interpreted
    case '\\': return 1;
    default: throw ParseError("internal: not a bond symbol");
  }
}

inline bool is_bond_symbol(char c) {
  return c == '-' || c == '=' || c == '#' || c == ':' || c == '/' || c == '\\';
}

// [isotope? symbol chirality? Hcount? charge?]
inline Atom parse_bracket_atom(const std::string& token) {
  Atom atom;
  atom.bracket = true;
  size_t i = 1;  // past '['
  const size_t end = token.size() - 1;

  while (i < end && std::isdigit(static_cast<unsigned char>(token[i]))) {
    atom.isotope = atom.isotope * 10 + (token[i] - '0');
    ++i;
  }

  if (i >= end) throw ParseError("bracket atom missing element symbol");
  if (std::isupper(static_cast<unsigned char>(token[i]))) {
    atom.symbol = token[i++];
    if (i < end && std::islower(static_cast<unsigned char>(token[i])) && token[i] != 'h') {
      // Longest-match two-letter element if the table knows it.
      const std::string two = atom.symbol + token[i];
      if (element_table().count(two)) {
        atom.symbol = two;
        ++i;
      }
    }
  } else if (std::islower(static_cast<unsigned char>(token[i])) &&
             is_aromatic_symbol(token[i])) {
    atom.aromatic = true;
    atom.symbol = static_cast<char>(std::toupper(static_cast<unsigned char>(token[i])));
    ++i;
  } else {
    throw ParseError(std::string("bad element symbol in bracket atom: ") + token);
  }
  if (!element_table().count(atom.symbol))
    throw ParseError("unknown element '" + atom.symbol + "'");

  if (i < end && token[i] == '@') {
    ++i;
    if (i < end && token[i] == '@') ++i;
  }

  if (i < end && token[i] == 'H') {
    ++i;
    if (i < end && std::isdigit(static_cast<unsigned char>(token[i]))) {
      atom.explicit_h = 0;
      while (i < end && std::isdigit(static_cast<unsigned char>(token[i])))
        atom.explicit_h = atom.explicit_h * 10 + (token[i++] - '0');
    } else {
      atom.explicit_h = 1;
    }
  }

  if (i < end && (token[i] == '+' || token[i] == '-')) {
    const char sign_char = token[i];
    const int sign = sign_char == '+' ? 1 : -1;
    int magnitude = 1;
    ++i;
    if (i < end && std::isdigit(static_cast<unsigned char>(token[i]))) {
      magnitude = 0;
      while (i < end && std::isdigit(static_cast<unsigned char>(token[i])))
        magnitude = magnitude * 10 + (token[i++] - '0');
    } else {
      while (i < end && token[i] == sign_char) {
        ++magnitude;
        ++i;
      }
    }
    atom.charge = sign * magnitude;
  }

  if (i != end)
    throw ParseError("unexpected content in bracket atom: " + token);
  return atom;
}

}  // namespace smiles_detail

// Parses the subset grammar and runs the valence check. Throws ParseError
// with the first defect found; check_validity converts that into a report.
inline ParsedMolecule parse_smiles(const std::string& smiles) {
  using namespace smiles_detail;

  std::vector<std::string> tokens;
  try {
    tokens = segment_smiles(smiles);
  } catch (const TokenError& e) {
    throw ParseError(e.what());
  }

  ParsedMolecule mol;
  mol.token_count = static_cast<int>(tokens.size());

  struct RingOpen {
    int atom;
    char bond = 0;  // 0 = unspecified
  };
  struct BranchFrame {
    int anchor;
    bool saw_atom = false;
  };

  int prev_atom = -1;
  char pending_bond = 0;
  std::map<std::string, RingOpen> open_rings;
  std::vector<BranchFrame> branch_stack;

  auto connect = [&](int a, int b, char bond_sym, bool both_aromatic) {
    int order = 1;
    if (bond_sym != 0)
      order = bond_order(bond_sym);
    else if (both_aromatic)
      order = 1;
    mol.bonds.push_back(Bond{a, b, order});
    mol.atoms[static_cast<size_t>(a)].bond_sum += order;
    mol.atoms[static_cast<size_t>(b)].bond_sum += order;
  };

  auto add_atom = [&](Atom atom) {
    mol.atoms.push_back(std::move(atom));
    const int idx = static_cast<int>(mol.atoms.size()) - 1;
    if (prev_atom >= 0) {
      const bool aromatic_pair = mol.atoms[static_cast<size_t>(prev_atom)].aromatic &&
                                 mol.atoms[static_cast<size_t>(idx)].aromatic;
      connect(prev_atom, idx, pending_bond, aromatic_pair);
    } else if (pending_bond != 0) {
      throw ParseError("bond does not connect two atoms");
    }
    pending_bond = 0;
    prev_atom = idx;
    if (!branch_stack.empty()) branch_stack.back().saw_atom = true;
  };

  auto ring_closure = [&](const std::string& label) {
    if (prev_atom < 0) throw ParseError("ring-closure digit before any atom");
    auto it = open_rings.find(label);
    if (it == open_rings.end()) {
      open_rings[label] = RingOpen{prev_atom, pending_bond};
      pending_bond = 0;
      return;
    }
    const RingOpen open = it->second;
    open_rings.erase(it);
    if (open.atom == prev_atom)
      throw ParseError("ring bond " + label + " closes on its own atom");
    if (open.bond != 0 && pending_bond != 0 && open.bond != pending_bond)
      throw ParseError("conflicting bond annotations on ring bond " + label);
    const char bond_sym = pending_bond != 0 ? pending_bond : open.bond;
    const bool aromatic_pair = mol.atoms[static_cast<size_t>(open.atom)].aromatic &&
                               mol.atoms[static_cast<size_t>(prev_atom)].aromatic;
    connect(open.atom, prev_atom, bond_sym, aromatic_pair);
    pending_bond = 0;
    ++mol.ring_pair_count;
  };

  for (const auto& tok : tokens) {
    if (tok.size() > 1 && tok[0] == '[') {
      add_atom(parse_bracket_atom(tok));
    } else if (tok == "Cl" || tok == "Br") {
      Atom a;
      a.symbol = tok;
      add_atom(std::move(a));
    } else if (tok.size() == 3 && tok[0] == '%') {
      ring_closure(tok.substr(1));
    } else if (tok.size() == 1) {
      const char c = tok[0];
      if (std::isupper(static_cast<unsigned char>(c))) {
        const std::string sym(1, c);
        if (!is_organic_subset(sym))
          throw ParseError("element '" + sym + "' must be written as a bracket atom");
        Atom a;
        a.symbol = sym;
        add_atom(std::move(a));
      } else if (is_aromatic_symbol(c)) {
        Atom a;
        a.symbol = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
        a.aromatic = true;
        add_atom(std::move(a));
      } else if (std::isdigit(static_cast<unsigned char>(c))) {
        ring_closure(tok);
      } else if (is_bond_symbol(c)) {
        if (prev_atom < 0) throw ParseError("bond does not connect two atoms");
        if (pending_bond != 0) throw ParseError("two consecutive bond symbols");
        pending_bond = c;
      } else if (c == '(') {
        if (prev_atom < 0) throw ParseError("branch before any atom");
        if (pending_bond != 0) throw ParseError("bond symbol before '('");
        branch_stack.push_back(BranchFrame{prev_atom, false});
        ++mol.branch_count;
      } else if (c == ')') {
        if (branch_stack.empty()) throw ParseError("unbalanced parenthesis: extra ')'");
        if (pending_bond != 0) throw ParseError("dangling bond before ')'");
        if (!branch_stack.back().saw_atom) throw ParseError("empty branch");
        prev_atom = branch_stack.back().anchor;
        branch_stack.pop_back();
      } else if (c == '.') {
        if (pending_bond != 0) throw ParseError("bond does not connect two atoms");
        prev_atom = -1;
      } else {
        throw ParseError(std::string("character '") + c + "' is not in the subset grammar");
      }
    } else {
      throw ParseError("unrecognized token '" + tok + "'");
    }
  }

  if (pending_bond != 0) throw ParseError("dangling bond at end of input");
  if (!branch_stack.empty()) throw ParseError("unbalanced parenthesis: missing ')'");
  if (!open_rings.empty()) {
    std::string label = open_rings.begin()->first;
    throw ParseError("unclosed ring bond " + label);
  }
  if (mol.atoms.empty()) throw ParseError("no atoms");

  // Valence cap: bond orders (aromatic as 1) plus bracket hydrogens must
  // not exceed the element maximum; cations on N and O raise the cap by
  // the charge.
  for (const auto& atom : mol.atoms) {
    const auto& info = element_table().at(atom.symbol);
    if (info.max_valence == 0) continue;
    int cap = info.max_valence;
    if (atom.charge > 0 && (atom.symbol == "N" || atom.symbol == "O"))
      cap += atom.charge;
    const double used = atom.bond_sum + atom.explicit_h;
    if (used > cap + 1e-9)
      throw ParseError("valence of " + atom.symbol + " exceeded (" +
                       std::to_string(used) + " > " + std::to_string(cap) + ")");
  }

  return mol;
}

inline ValidityReport check_validity(const std::string& smiles) {
  ValidityReport report;
  try {
    (void)parse_smiles(smiles);
    report.valid = true;
  } catch (const ParseError& e) {
    report.valid = false;
    report.error = e.what();
  }
  return report;
}

// Implicit hydrogen count used by the descriptor module. Bracket atoms
// carry their explicit count. For organic-subset atoms the count is the
// smallest allowed valence at or above the bond order sum, minus that sum;
// aromatic c/n/b/p add one to the sum for the delocalized bond (see
// docs/smiles_grammar.md).
inline int implicit_hydrogens(const Atom& atom) {
  using namespace smiles_detail;
  if (atom.bracket) return atom.explicit_h;
  const auto& info = element_table().at(atom.symbol);
  if (info.valences.empty()) return 0;
  double adjusted = atom.bond_sum;
  if (atom.aromatic && atom.symbol != "O" && atom.symbol != "S") adjusted += 1.0;
  for (int v : info.valences)
    if (static_cast<double>(v) + 1e-9 >= adjusted)
      return v - static_cast<int>(std::lround(adjusted));
  return 0;
}

}  // namespace duet
