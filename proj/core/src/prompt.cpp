#include <sstream>

#include "nback/error.hpp"
#include "nback/rng.hpp"
#include "nback/trial_engine.hpp"

namespace nback {
namespace {

std::string example_line(int n, Stream& stream) {
  std::vector<Letter> letters;
  letters.reserve(10);
  for (int i = 0; i < 10; ++i) {
    letters.push_back(Letter::from_index(static_cast<int>(stream.uniform_below(kLetterCount))));
  }
  StimulusSequence seq;
  seq.letters = letters;
  const GroundTruth gt = ground_truth(seq, n);
  std::string response;
  for (const auto& a : gt.answers) response += a.to_char();
  return "Stimuli: " + letters_to_string(letters) + "    Response: " + response;
}

}  // namespace

std::string render_system_prompt(int n, std::uint64_t example_seed) {
  if (n < 1 || n > 9) throw ParameterError("render_system_prompt: n must be in 1..9");
  Stream stream(example_seed, "prompt-examples");
  const std::string one_back = example_line(1, stream);
  const std::string two_back = example_line(2, stream);
  const std::string N = std::to_string(n);

  std::ostringstream out;
  out << "You are taking part in a working-memory experiment called an N-back task.\n"
      << "\n"
      << "How the task works:\n"
      << "  - You will see one letter at a time, written as \"X\".\n"
      << "  - The first letter you see is turn t = 0, then t = 1, t = 2, and so on.\n"
      << "  - On each turn, report the letter that appeared N turns earlier.\n"
      << "\n"
      << "Response rule (N = " << N << "):\n"
      << "  - If fewer than N letters have appeared so far (t < N), respond with -.\n"
      << "  - Otherwise (t >= N), respond with the letter shown at turn (t - N).\n"
      << "  - Here are a 1-back and a 2-back example to help you understand:\n"
      << "\n"
      << "  1-back    " << one_back << "\n"
      << "  2-back    " << two_back << "\n"
      << "\n"
      << "Important:\n"
      << "  - At any moment, only the last N letters you saw matter.\n"
      << "  - Letters seen earlier than that are no longer relevant.\n"
      << "  - Respond based only on the letter from N turns ago.\n"
      << "\n"
      << "Response format (STRICT):\n"
      << "  - Respond with exactly one response per turn.\n"
      << "  - The entire response must be a single token: A-Z or -.\n"
      << "  - Do not include explanations, spaces, or extra text.\n"
      << "\n"
      << "Turn-by-turn example (N = " << N << "):\n";
  const int lines = n + 3;
  for (int t = 0; t < lines; ++t) {
    const char user = static_cast<char>('A' + t);
    const char assistant = t < n ? '-' : static_cast<char>('A' + t - n);
    out << "  User: " << user << "    Assistant: " << assistant << "\n";
  }
  return out.str();
}

}  // namespace nback
