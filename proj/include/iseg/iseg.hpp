#pragma once

#include "iseg/attention.hpp"
#include "iseg/digest.hpp"
#include "iseg/dumpio.hpp"
#include "iseg/eval.hpp"
#include "iseg/fixtures.hpp"
#include "iseg/log.hpp"
#include "iseg/pipeline.hpp"
#include "iseg/png.hpp"
#include "iseg/resample.hpp"
#include "iseg/synthetic_dump.hpp"
#include "iseg/types.hpp"
#include "iseg/version.hpp"
