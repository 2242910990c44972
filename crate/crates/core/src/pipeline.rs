// pipeline driver
