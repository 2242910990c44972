// if-conversion baseline
