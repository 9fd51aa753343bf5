#include <gtest/gtest.h>

#include "dualtrack/text.hpp"

using namespace dualtrack::text;

TEST(Text, TokenizeLowercasesAndSplits) {
  EXPECT_EQ(tokenize("Please bring James COFFEE!"), (std::vector<std::string>{"please", "bring", "james", "coffee"}));
  EXPECT_EQ(tokenize("  "), std::vector<std::string>{});
  EXPECT_EQ(tokenize("nate's  soda,pop"), (std::vector<std::string>{"nates", "soda", "pop"}));
}

TEST(Text, CanonicalAndSurfaceForms) {
  EXPECT_EQ(canonical_name("Mary Jane!"), "mary_jane");
  EXPECT_EQ(canonical_name("  Dennis "), "dennis");
  EXPECT_EQ(canonical_name("?!"), "");
  EXPECT_EQ(surface_of("mary_jane"), "mary jane");
  EXPECT_EQ(capitalize("nate"), "Nate");
  EXPECT_EQ(trim("\t a b \n"), "a b");
}
